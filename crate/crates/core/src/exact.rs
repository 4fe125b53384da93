//! Exact Shannon information on small discrete distributions, and
//! exhaustive verification of the Markov-chain bounds for the flow
//! `Y -> X -> Z1 -> Z2 -> R`.
//!
//! Everything here enumerates full joint tables, so alphabets are capped at
//! 8 symbols per variable (32768 joint cells at worst) and every quantity is
//! exact up to floating-point rounding. All results are in nats.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use libm::log;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::tensor::DenseMatrix;

/// Largest alphabet per chain variable.
pub const MAX_ALPHABET: usize = 8;

const PMF_SUM_TOL: f64 = 1e-12;
const CHAIN_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExactError {
    #[error("pmf is empty")]
    EmptyPmf,
    #[error("probability {value} at index {index} is negative")]
    NegativeProbability { index: usize, value: f64 },
    #[error("pmf sums to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("alphabet size {size} outside [1, {max}]")]
    SizeOutOfRange { size: usize, max: usize },
    #[error("channel has {rows} rows, expected {expected}")]
    ChannelShape { rows: usize, expected: usize },
    #[error("channel output size {got} does not compose with next input size {expected}")]
    ChainComposition { got: usize, expected: usize },
    #[error("chain joint sums to {sum}, expected 1")]
    InvalidChain { sum: f64 },
    #[error("joint table has {got} cells, expected {expected}")]
    JointShape { got: usize, expected: usize },
}

/// Probability mass function: nonnegative entries summing to 1 within 1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    probs: Vec<f64>,
}

impl Pmf {
    pub fn new(probs: Vec<f64>) -> Result<Self, ExactError> {
        if probs.is_empty() {
            return Err(ExactError::EmptyPmf);
        }
        let mut sum = 0.0;
        for (index, &value) in probs.iter().enumerate() {
            if value < 0.0 {
                return Err(ExactError::NegativeProbability { index, value });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > PMF_SUM_TOL {
            return Err(ExactError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self, ExactError> {
        if n == 0 {
            return Err(ExactError::EmptyPmf);
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    /// Point mass on `at`.
    pub fn delta(n: usize, at: usize) -> Result<Self, ExactError> {
        if n == 0 || at >= n {
            return Err(ExactError::EmptyPmf);
        }
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Conditional law: one output pmf per input symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    rows: Vec<Pmf>,
    out_size: usize,
}

impl Channel {
    pub fn new(rows: Vec<Pmf>) -> Result<Self, ExactError> {
        let out_size = match rows.first() {
            Some(r) => r.len(),
            None => {
                return Err(ExactError::ChannelShape {
                    rows: 0,
                    expected: 1,
                })
            }
        };
        for r in &rows {
            if r.len() != out_size {
                return Err(ExactError::ChannelShape {
                    rows: r.len(),
                    expected: out_size,
                });
            }
        }
        Ok(Self { rows, out_size })
    }

    pub fn identity(n: usize) -> Result<Self, ExactError> {
        let rows = (0..n).map(|i| Pmf::delta(n, i)).collect::<Result<_, _>>()?;
        Ok(Self { rows, out_size: n })
    }

    /// Output uniform regardless of input: destroys all information.
    pub fn uniform(in_size: usize, out_size: usize) -> Result<Self, ExactError> {
        let row = Pmf::uniform(out_size)?;
        Ok(Self {
            rows: vec![row; in_size],
            out_size,
        })
    }

    pub fn in_size(&self) -> usize {
        self.rows.len()
    }

    pub fn out_size(&self) -> usize {
        self.out_size
    }

    pub fn prob(&self, input: usize, output: usize) -> f64 {
        self.rows[input].probs()[output]
    }
}

/// Which chain variable, in flow order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVar {
    Y,
    X,
    Z1,
    Z2,
    R,
}

impl ChainVar {
    fn axis(self) -> usize {
        match self {
            ChainVar::Y => 0,
            ChainVar::X => 1,
            ChainVar::Z1 => 2,
            ChainVar::Z2 => 3,
            ChainVar::R => 4,
        }
    }
}

/// Exact joint distribution over `(Y, X, Z1, Z2, R)` factorized along the
/// chain. Construction materializes and validates the dense joint table.
#[derive(Debug, Clone)]
pub struct JointChain {
    p_y: Pmf,
    ch_yx: Channel,
    ch_xz1: Channel,
    ch_z1z2: Channel,
    ch_z2r: Channel,
    sizes: [usize; 5],
    joint: Vec<f64>,
}

impl JointChain {
    pub fn new(
        p_y: Pmf,
        ch_yx: Channel,
        ch_xz1: Channel,
        ch_z1z2: Channel,
        ch_z2r: Channel,
    ) -> Result<Self, ExactError> {
        let sizes = [
            p_y.len(),
            ch_yx.out_size(),
            ch_xz1.out_size(),
            ch_z1z2.out_size(),
            ch_z2r.out_size(),
        ];
        let pairs = [
            (p_y.len(), ch_yx.in_size()),
            (ch_yx.out_size(), ch_xz1.in_size()),
            (ch_xz1.out_size(), ch_z1z2.in_size()),
            (ch_z1z2.out_size(), ch_z2r.in_size()),
        ];
        for (got, expected) in pairs {
            if got != expected {
                return Err(ExactError::ChainComposition { got, expected });
            }
        }

        let [sy, sx, s1, s2, sr] = sizes;
        let mut joint = vec![0.0; sy * sx * s1 * s2 * sr];
        let mut idx = 0;
        let mut sum = 0.0;
        for y in 0..sy {
            let py = p_y.probs()[y];
            for x in 0..sx {
                let pyx = py * ch_yx.prob(y, x);
                for z1 in 0..s1 {
                    let pz1 = pyx * ch_xz1.prob(x, z1);
                    for z2 in 0..s2 {
                        let pz2 = pz1 * ch_z1z2.prob(z1, z2);
                        for r in 0..sr {
                            let p = pz2 * ch_z2r.prob(z2, r);
                            joint[idx] = p;
                            sum += p;
                            idx += 1;
                        }
                    }
                }
            }
        }
        if (sum - 1.0).abs() > CHAIN_SUM_TOL {
            return Err(ExactError::InvalidChain { sum });
        }

        Ok(Self {
            p_y,
            ch_yx,
            ch_xz1,
            ch_z1z2,
            ch_z2r,
            sizes,
            joint,
        })
    }

    pub fn sizes(&self) -> [usize; 5] {
        self.sizes
    }

    pub fn p_y(&self) -> &Pmf {
        &self.p_y
    }

    pub fn channels(&self) -> [&Channel; 4] {
        [&self.ch_yx, &self.ch_xz1, &self.ch_z1z2, &self.ch_z2r]
    }

    /// Marginal table over `vars`, indexed in the given order.
    pub fn marginal(&self, vars: &[ChainVar]) -> (Vec<f64>, Vec<usize>) {
        let dims: Vec<usize> = vars.iter().map(|v| self.sizes[v.axis()]).collect();
        let mut out = vec![0.0; dims.iter().product::<usize>().max(1)];
        let [sy, sx, s1, s2, sr] = self.sizes;
        let mut idx = 0;
        for y in 0..sy {
            for x in 0..sx {
                for z1 in 0..s1 {
                    for z2 in 0..s2 {
                        for r in 0..sr {
                            let p = self.joint[idx];
                            idx += 1;
                            if p == 0.0 {
                                continue;
                            }
                            let coords = [y, x, z1, z2, r];
                            let mut flat = 0;
                            for (v, d) in vars.iter().zip(&dims) {
                                flat = flat * d + coords[v.axis()];
                            }
                            out[flat] += p;
                        }
                    }
                }
            }
        }
        (out, dims)
    }

    /// Pairwise joint as a matrix, rows indexed by `a`.
    pub fn pair_marginal(&self, a: ChainVar, b: ChainVar) -> DenseMatrix {
        let (table, dims) = self.marginal(&[a, b]);
        DenseMatrix::from_vec(dims[0], dims[1], table).expect("marginal of a finite joint")
    }

    pub fn var_entropy(&self, v: ChainVar) -> f64 {
        let (table, _) = self.marginal(&[v]);
        entropy_slice(&table)
    }

    pub fn pair_mi(&self, a: ChainVar, b: ChainVar) -> f64 {
        let joint = self.pair_marginal(a, b);
        mutual_information(&joint).expect("marginal of a valid chain is a valid pmf")
    }

    /// `I(a; b | c)` computed from the exact three-way marginal.
    pub fn conditional_pair_mi(&self, a: ChainVar, b: ChainVar, c: ChainVar) -> f64 {
        let (table, dims) = self.marginal(&[a, b, c]);
        conditional_mi(&table, [dims[0], dims[1], dims[2]])
            .expect("marginal of a valid chain is a valid pmf")
    }
}

/// Shannon entropy `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &Pmf) -> f64 {
    entropy_slice(p.probs())
}

fn entropy_slice(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * log(p);
        }
    }
    h
}

/// Mutual information of a two-variable joint pmf laid out as a matrix:
/// `I = H(rows) + H(cols) - H(joint)`, clamped at zero against rounding.
pub fn mutual_information(joint: &DenseMatrix) -> Result<f64, ExactError> {
    validate_joint(joint.data())?;
    let rows = joint.rows();
    let cols = joint.cols();
    let mut p_a = vec![0.0; rows];
    let mut p_b = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let p = joint.get(r, c);
            p_a[r] += p;
            p_b[c] += p;
        }
    }
    let raw = entropy_slice(&p_a) + entropy_slice(&p_b) - entropy_slice(joint.data());
    Ok(raw.max(0.0))
}

/// Conditional mutual information `I(A;B|C)` from a dense three-variable
/// joint `p(a, b, c)` with `c` fastest.
pub fn conditional_mi(probs: &[f64], dims: [usize; 3]) -> Result<f64, ExactError> {
    let [da, db, dc] = dims;
    if probs.len() != da * db * dc {
        return Err(ExactError::JointShape {
            got: probs.len(),
            expected: da * db * dc,
        });
    }
    validate_joint(probs)?;

    let at = |a: usize, b: usize, c: usize| probs[(a * db + b) * dc + c];
    let mut p_c = vec![0.0; dc];
    let mut p_ac = vec![0.0; da * dc];
    let mut p_bc = vec![0.0; db * dc];
    for a in 0..da {
        for b in 0..db {
            for c in 0..dc {
                let p = at(a, b, c);
                p_c[c] += p;
                p_ac[a * dc + c] += p;
                p_bc[b * dc + c] += p;
            }
        }
    }

    let mut mi = 0.0;
    for a in 0..da {
        for b in 0..db {
            for c in 0..dc {
                let p = at(a, b, c);
                if p > 0.0 {
                    mi += p * log(p * p_c[c] / (p_ac[a * dc + c] * p_bc[b * dc + c]));
                }
            }
        }
    }
    Ok(mi)
}

fn validate_joint(probs: &[f64]) -> Result<(), ExactError> {
    if probs.is_empty() {
        return Err(ExactError::EmptyPmf);
    }
    let mut sum = 0.0;
    for (index, &value) in probs.iter().enumerate() {
        if value < 0.0 {
            return Err(ExactError::NegativeProbability { index, value });
        }
        sum += value;
    }
    if (sum - 1.0).abs() > PMF_SUM_TOL {
        return Err(ExactError::NotNormalized { sum });
    }
    Ok(())
}

/// Draw a random chain with the given alphabet sizes. Every pmf (the source
/// and each channel row) is a symmetric Dirichlet(1) draw, i.e. uniform on
/// the simplex, so the sampler covers the whole space of chains.
pub fn sample_chain(sizes: [usize; 5], seed: u64) -> Result<JointChain, ExactError> {
    for &size in &sizes {
        if size == 0 || size > MAX_ALPHABET {
            return Err(ExactError::SizeOutOfRange {
                size,
                max: MAX_ALPHABET,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_y = dirichlet_row(sizes[0], &mut rng)?;
    let ch_yx = dirichlet_channel(sizes[0], sizes[1], &mut rng)?;
    let ch_xz1 = dirichlet_channel(sizes[1], sizes[2], &mut rng)?;
    let ch_z1z2 = dirichlet_channel(sizes[2], sizes[3], &mut rng)?;
    let ch_z2r = dirichlet_channel(sizes[3], sizes[4], &mut rng)?;
    JointChain::new(p_y, ch_yx, ch_xz1, ch_z1z2, ch_z2r)
}

fn dirichlet_row(n: usize, rng: &mut ChaCha8Rng) -> Result<Pmf, ExactError> {
    // Dirichlet(1, ..., 1) == normalized iid Exp(1) draws.
    let mut draws = Vec::with_capacity(n);
    let mut sum = 0.0;
    for _ in 0..n {
        let e: f64 = Exp1.sample(rng);
        draws.push(e);
        sum += e;
    }
    for d in &mut draws {
        *d /= sum;
    }
    Pmf::new(draws)
}

fn dirichlet_channel(
    in_size: usize,
    out_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Channel, ExactError> {
    let rows = (0..in_size)
        .map(|_| dirichlet_row(out_size, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Channel::new(rows)
}

/// Which bound a [`BoundReport`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremId {
    /// Lower bound `I(Y;Z1) >= I(Z1;R) - I(Z1;Z2) + I(R;Y)`.
    Lower,
    /// Upper bound `I(Y;Z1) <= I(Y;Z2) - I(Z1;Z2) + H(Z1)`.
    Upper,
    /// Discretization lower bound `I(Y;Z1) >= -H(Z2) + I(Z2;R) + I(R;Y)`.
    DiscretizationLower,
}

impl TheoremId {
    pub fn as_str(self) -> &'static str {
        match self {
            TheoremId::Lower => "theorem1",
            TheoremId::Upper => "theorem2",
            TheoremId::DiscretizationLower => "theorem3",
        }
    }
}

/// One verified bound: `slack >= 0` (up to rounding) means the bound holds.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub theorem: TheoremId,
    /// Bounded quantity, always `I(Y;Z1)` here.
    pub lhs: f64,
    /// Bounding expression.
    pub rhs: f64,
    /// `lhs - rhs` for lower bounds, `rhs - lhs` for upper bounds.
    pub slack: f64,
    pub terms: BTreeMap<&'static str, f64>,
}

/// `I(Y;Z1) >= I(Z1;R) - I(Z1;Z2) + I(R;Y)`.
pub fn check_theorem1(chain: &JointChain) -> BoundReport {
    let i_y_z1 = chain.pair_mi(ChainVar::Y, ChainVar::Z1);
    let i_z1_r = chain.pair_mi(ChainVar::Z1, ChainVar::R);
    let i_z1_z2 = chain.pair_mi(ChainVar::Z1, ChainVar::Z2);
    let i_r_y = chain.pair_mi(ChainVar::R, ChainVar::Y);
    let rhs = i_z1_r - i_z1_z2 + i_r_y;
    let mut terms = BTreeMap::new();
    terms.insert("i_y_z1", i_y_z1);
    terms.insert("i_z1_r", i_z1_r);
    terms.insert("i_z1_z2", i_z1_z2);
    terms.insert("i_r_y", i_r_y);
    BoundReport {
        theorem: TheoremId::Lower,
        lhs: i_y_z1,
        rhs,
        slack: i_y_z1 - rhs,
        terms,
    }
}

/// `I(Y;Z1) <= I(Y;Z2) - I(Z1;Z2) + H(Z1)`.
pub fn check_theorem2(chain: &JointChain) -> BoundReport {
    let i_y_z1 = chain.pair_mi(ChainVar::Y, ChainVar::Z1);
    let i_y_z2 = chain.pair_mi(ChainVar::Y, ChainVar::Z2);
    let i_z1_z2 = chain.pair_mi(ChainVar::Z1, ChainVar::Z2);
    let h_z1 = chain.var_entropy(ChainVar::Z1);
    let rhs = i_y_z2 - i_z1_z2 + h_z1;
    let mut terms = BTreeMap::new();
    terms.insert("i_y_z1", i_y_z1);
    terms.insert("i_y_z2", i_y_z2);
    terms.insert("i_z1_z2", i_z1_z2);
    terms.insert("h_z1", h_z1);
    BoundReport {
        theorem: TheoremId::Upper,
        lhs: i_y_z1,
        rhs,
        slack: rhs - i_y_z1,
        terms,
    }
}

/// `I(Y;Z1) >= -H(Z2) + I(Z2;R) + I(R;Y)`.
pub fn check_theorem3(chain: &JointChain) -> BoundReport {
    let i_y_z1 = chain.pair_mi(ChainVar::Y, ChainVar::Z1);
    let h_z2 = chain.var_entropy(ChainVar::Z2);
    let i_z2_r = chain.pair_mi(ChainVar::Z2, ChainVar::R);
    let i_r_y = chain.pair_mi(ChainVar::R, ChainVar::Y);
    let rhs = -h_z2 + i_z2_r + i_r_y;
    let mut terms = BTreeMap::new();
    terms.insert("i_y_z1", i_y_z1);
    terms.insert("h_z2", h_z2);
    terms.insert("i_z2_r", i_z2_r);
    terms.insert("i_r_y", i_r_y);
    BoundReport {
        theorem: TheoremId::DiscretizationLower,
        lhs: i_y_z1,
        rhs,
        slack: i_y_z1 - rhs,
        terms,
    }
}

/// Markov-structure identities and data-processing inequalities underlying
/// the bounds.
#[derive(Debug, Clone)]
pub struct LemmaReport {
    /// `I(Y;R|Z1)`, exactly zero for a chain.
    pub i_y_r_given_z1: f64,
    /// `I(Y;Z2|Z1)`, exactly zero for a chain.
    pub i_y_z2_given_z1: f64,
    /// `I(Z1;Z2) - I(Z1;R) >= 0`.
    pub dpi_slack_z1: f64,
    /// `I(Z2;R) - I(Z1;R) >= 0`.
    pub dpi_slack_r: f64,
}

impl LemmaReport {
    pub const CUTOFF_TOL: f64 = 1e-12;
    pub const DPI_TOL: f64 = 1e-10;

    pub fn passes(&self) -> bool {
        self.i_y_r_given_z1.abs() <= Self::CUTOFF_TOL
            && self.i_y_z2_given_z1.abs() <= Self::CUTOFF_TOL
            && self.dpi_slack_z1 >= -Self::DPI_TOL
            && self.dpi_slack_r >= -Self::DPI_TOL
    }
}

pub fn check_lemmas(chain: &JointChain) -> LemmaReport {
    let i_z1_z2 = chain.pair_mi(ChainVar::Z1, ChainVar::Z2);
    let i_z1_r = chain.pair_mi(ChainVar::Z1, ChainVar::R);
    let i_z2_r = chain.pair_mi(ChainVar::Z2, ChainVar::R);
    LemmaReport {
        i_y_r_given_z1: chain.conditional_pair_mi(ChainVar::Y, ChainVar::R, ChainVar::Z1),
        i_y_z2_given_z1: chain.conditional_pair_mi(ChainVar::Y, ChainVar::Z2, ChainVar::Z1),
        dpi_slack_z1: i_z1_z2 - i_z1_r,
        dpi_slack_r: i_z2_r - i_z1_r,
    }
}
