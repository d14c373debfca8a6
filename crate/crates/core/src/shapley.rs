//! Exact Shapley enumeration and the stochastic Shapley-KL estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::menn::{PsiModel, RemovalMask};
use crate::nncore::Matrix;

/// Largest feature count accepted by exhaustive enumeration.
pub const MAX_EXACT_FEATURES: usize = 20;

/// A coalition `S ⊆ [D]` stored as a bitset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct FeatureSubset(u64);

impl FeatureSubset {
    pub const MAX_FEATURES: usize = 63;

    pub const fn empty() -> Self {
        FeatureSubset(0)
    }

    pub fn full(n: usize) -> Self {
        assert!(n <= Self::MAX_FEATURES, "at most {} features", Self::MAX_FEATURES);
        FeatureSubset((1u64 << n) - 1)
    }

    pub const fn from_bits(bits: u64) -> Self {
        FeatureSubset(bits)
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        indices.into_iter().fold(Self::empty(), |s, d| s.with(d))
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, d: usize) -> bool {
        d < 64 && self.0 & (1u64 << d) != 0
    }

    #[must_use]
    pub fn with(self, d: usize) -> Self {
        assert!(d < Self::MAX_FEATURES, "feature index {d} out of range");
        FeatureSubset(self.0 | (1u64 << d))
    }

    #[must_use]
    pub fn without(self, d: usize) -> Self {
        if d >= 64 {
            return self;
        }
        FeatureSubset(self.0 & !(1u64 << d))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: FeatureSubset) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: FeatureSubset) -> Self {
        FeatureSubset(self.0 | other.0)
    }

    /// Members in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let d = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(d)
        })
    }

    pub fn to_mask(self, n: usize) -> RemovalMask {
        RemovalMask::from_subset(self, n)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `|S|!(D−|S|−1)!/D!`, the probability of a coalition of the given size.
pub fn shapley_kernel_weight(subset_size: usize, n_features: usize) -> Result<f64> {
    if subset_size >= n_features {
        return Err(Error::Domain(format!(
            "coalition size {subset_size} must be below the feature count {n_features}"
        )));
    }
    Ok(1.0 / (n_features as f64 * binomial(n_features - 1, subset_size)))
}

/// A set function `v(S)` over `D` players.
pub trait CoalitionGame {
    fn n_players(&self) -> usize;

    /// `v(S)` for every requested coalition, in order.
    fn values(&self, subsets: &[FeatureSubset]) -> Result<Vec<f64>>;
}

/// Wraps a closure as a game.
pub struct FnGame<F> {
    n: usize,
    f: F,
}

impl<F: Fn(FeatureSubset) -> f64> FnGame<F> {
    pub fn new(n: usize, f: F) -> Self {
        FnGame { n, f }
    }
}

impl<F: Fn(FeatureSubset) -> f64> CoalitionGame for FnGame<F> {
    fn n_players(&self) -> usize {
        self.n
    }

    fn values(&self, subsets: &[FeatureSubset]) -> Result<Vec<f64>> {
        Ok(subsets.iter().map(|&s| (self.f)(s)).collect())
    }
}

/// `f(x_S) = Σ_d f_d(x_S)` of a model at a fixed input, with `S` realized as a removal mask.
pub struct ModelGame<'a> {
    model: &'a PsiModel,
    x: Vec<f64>,
}

impl<'a> ModelGame<'a> {
    pub fn new(model: &'a PsiModel, x: &[f64]) -> Result<Self> {
        if x.len() != model.n_features() {
            return Err(Error::shape("ModelGame", model.n_features(), x.len()));
        }
        Ok(ModelGame {
            model,
            x: x.to_vec(),
        })
    }
}

impl CoalitionGame for ModelGame<'_> {
    fn n_players(&self) -> usize {
        self.model.n_features()
    }

    fn values(&self, subsets: &[FeatureSubset]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(subsets.len());
        for chunk in subsets.chunks(CHUNK) {
            out.extend(self.model.coalition_values(&self.x, chunk)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub phi: Vec<f64>,
    pub f_full: f64,
    pub f_empty: f64,
}

impl ShapleyResult {
    /// `Σ φ_d − (f(x) − f(∅))`.
    pub fn efficiency_residual(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.f_full - self.f_empty)
    }
}

fn check_capacity(n: usize) -> Result<()> {
    if n > MAX_EXACT_FEATURES {
        return Err(Error::Capacity(format!(
            "exact enumeration supports at most {MAX_EXACT_FEATURES} features, got {n}"
        )));
    }
    Ok(())
}

fn kernel_table(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| shapley_kernel_weight(k, n).expect("size below n"))
        .collect()
}

/// `φ_d` from a table of `v` over all `2^D` coalitions indexed by bitmask,
/// summing over coalitions in the given order of `S ⊆ [D]∖{d}` bitmasks.
pub(crate) fn phi_from_table(table: &[f64], n: usize, d: usize, order: &[u64]) -> f64 {
    let weights = kernel_table(n);
    let bit = 1u64 << d;
    order
        .iter()
        .map(|&s| {
            debug_assert_eq!(s & bit, 0);
            let k = s.count_ones() as usize;
            weights[k] * (table[(s | bit) as usize] - table[s as usize])
        })
        .sum()
}

fn coalitions_without(n: usize, d: usize) -> Vec<u64> {
    let bit = 1u64 << d;
    (0..1u64 << n).filter(|s| s & bit == 0).collect()
}

/// `φ_d = Σ_{S⊆[D]∖{d}} p(S)·(v(S∪{d}) − v(S))`.
pub fn exact_shapley<G: CoalitionGame + ?Sized>(game: &G, d: usize) -> Result<f64> {
    let n = game.n_players();
    check_capacity(n)?;
    if d >= n {
        return Err(Error::Domain(format!("pivot {d} out of range for {n} features")));
    }
    let weights = kernel_table(n);
    let without = coalitions_without(n, d);
    let mut subsets = Vec::with_capacity(2 * without.len());
    for &s in &without {
        subsets.push(FeatureSubset::from_bits(s));
        subsets.push(FeatureSubset::from_bits(s | (1 << d)));
    }
    let v = game.values(&subsets)?;
    Ok(without
        .iter()
        .enumerate()
        .map(|(i, &s)| weights[s.count_ones() as usize] * (v[2 * i + 1] - v[2 * i]))
        .sum())
}

/// All `φ_d` from a single pass over the `2^D` coalitions.
pub fn exact_shapley_all<G: CoalitionGame + ?Sized>(game: &G) -> Result<ShapleyResult> {
    let n = game.n_players();
    check_capacity(n)?;
    let subsets: Vec<FeatureSubset> = (0..1u64 << n).map(FeatureSubset::from_bits).collect();
    let table = game.values(&subsets)?;
    let phi = (0..n)
        .map(|d| phi_from_table(&table, n, d, &coalitions_without(n, d)))
        .collect();
    Ok(ShapleyResult {
        phi,
        f_full: table[(1usize << n) - 1],
        f_empty: table[0],
    })
}

/// Exact Shapley values of the model's additive output at `x`.
pub fn model_shapley(model: &PsiModel, x: &[f64]) -> Result<ShapleyResult> {
    exact_shapley_all(&ModelGame::new(model, x)?)
}

/// Draws `S ⊆ universe ∖ {pivot}` with the Shapley kernel over the universe:
/// a size uniform on `{0, …, |universe|−1}`, then a uniform subset of that size.
pub fn sample_coalition_in<R: Rng + ?Sized>(
    pivot: usize,
    universe: FeatureSubset,
    rng: &mut R,
) -> FeatureSubset {
    let others: Vec<usize> = universe.without(pivot).iter().collect();
    let n = others.len();
    let k = rng.random_range(0..=n);
    rand::seq::index::sample(rng, n, k)
        .iter()
        .fold(FeatureSubset::empty(), |s, i| s.with(others[i]))
}

/// Draws `S ⊆ [D] ∖ {d}` with probability `p(S)`.
pub fn sample_coalition<R: Rng + ?Sized>(d: usize, n_features: usize, rng: &mut R) -> FeatureSubset {
    sample_coalition_in(d, FeatureSubset::full(n_features), rng)
}

/// `Σ_d (φ_d − f_d)² / (2σ_d²)`.
pub fn d_shap_from_values(phi: &[f64], f: &[f64], sigma: &[f64]) -> f64 {
    phi.iter()
        .zip(f)
        .zip(sigma)
        .map(|((p, f), s)| (p - f).powi(2) / (2.0 * s * s))
        .sum()
}

/// Shapley-KL divergence of the model at `x` with all features present.
pub fn d_shap_exact(model: &PsiModel, x: &[f64]) -> Result<f64> {
    let n = model.n_features();
    check_capacity(n)?;
    let exact = model_shapley(model, x)?;
    let pred = model.predict_full(&Matrix::row_vector(x))?;
    Ok(d_shap_from_values(
        &exact.phi,
        pred.f.data(),
        pred.sigma.data(),
    ))
}

/// One draw of the Shapley-KL estimator given the marginal-contribution means.
pub fn d_shap_hat_from_values(n_retained: usize, mean1: f64, mean2: f64, f_d: f64, sigma_d: f64) -> f64 {
    n_retained as f64 * ((mean1 - f_d) * (mean2 - f_d)).abs() / (2.0 * sigma_d * sigma_d)
}

/// Pivot and coalitions of one estimator draw inside a retained set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapDraw {
    pub pivot: usize,
    pub first: Vec<FeatureSubset>,
    pub second: Vec<FeatureSubset>,
}

/// Pivot uniform over `retained`, then `k1` and `k2` kernel coalitions inside it.
/// `None` for an empty retained set.
pub fn sample_shap_draw<R: Rng + ?Sized>(
    retained: FeatureSubset,
    k1: usize,
    k2: usize,
    rng: &mut R,
) -> Option<ShapDraw> {
    if retained.is_empty() {
        return None;
    }
    let members: Vec<usize> = retained.iter().collect();
    let pivot = members[rng.random_range(0..members.len())];
    let first = (0..k1).map(|_| sample_coalition_in(pivot, retained, rng)).collect();
    let second = (0..k2).map(|_| sample_coalition_in(pivot, retained, rng)).collect();
    Some(ShapDraw {
        pivot,
        first,
        second,
    })
}

/// Mean marginal contribution of `pivot` over the coalitions.
pub fn mean_marginal<G: CoalitionGame + ?Sized>(
    game: &G,
    pivot: usize,
    coalitions: &[FeatureSubset],
) -> Result<f64> {
    let mut subsets = Vec::with_capacity(2 * coalitions.len());
    for &s in coalitions {
        subsets.push(s);
        subsets.push(s.with(pivot));
    }
    let v = game.values(&subsets)?;
    Ok(v.chunks(2).map(|p| p[1] - p[0]).sum::<f64>() / coalitions.len() as f64)
}

/// One draw of `D̂_SHAP` for the game, given per-feature `f` and `σ`
/// under the retained set.
pub fn d_shap_hat_game<G: CoalitionGame + ?Sized, R: Rng + ?Sized>(
    game: &G,
    f: &[f64],
    sigma: &[f64],
    retained: FeatureSubset,
    rng: &mut R,
    k1: usize,
    k2: usize,
) -> Result<f64> {
    if k1 == 0 || k2 == 0 {
        return Err(Error::Config("estimator sample counts must be positive".into()));
    }
    let Some(draw) = sample_shap_draw(retained, k1, k2, rng) else {
        return Ok(0.0);
    };
    let m1 = mean_marginal(game, draw.pivot, &draw.first)?;
    let m2 = mean_marginal(game, draw.pivot, &draw.second)?;
    Ok(d_shap_hat_from_values(
        retained.len(),
        m1,
        m2,
        f[draw.pivot],
        sigma[draw.pivot],
    ))
}

/// One draw of `D̂_SHAP` for the model at `x` with the given retained features.
pub fn d_shap_hat<R: Rng + ?Sized>(
    model: &PsiModel,
    x: &[f64],
    retained: FeatureSubset,
    rng: &mut R,
    k1: usize,
    k2: usize,
) -> Result<f64> {
    let n = model.n_features();
    if !retained.is_subset_of(FeatureSubset::full(n)) {
        return Err(Error::Domain("retained set exceeds the feature count".into()));
    }
    let game = ModelGame::new(model, x)?;
    let pred = model.predict(
        &Matrix::row_vector(x),
        &Matrix::row_vector(&retained.to_mask(n).to_f64()),
    )?;
    d_shap_hat_game(&game, pred.f.data(), pred.sigma.data(), retained, rng, k1, k2)
}
