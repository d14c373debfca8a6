//! Weight masks that give every input feature a private band of neurons.
//!
//! Layer `k` assigns each feature `d` a contiguous band of its output
//! columns. Column `l` in the band of `d` is connected to input row `i`
//! exactly when `i` already carries information from `d`, i.e. when
//! `M_{1:k-1}(d, i) > 0`. The product `M_1 ⋯ M_K` is then block-structured.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::nncore::Matrix;

/// How ties of `nint(width / D)` are resolved when computing band widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum BandRounding {
    /// Round to nearest, halves up.
    Nearest {},
    /// Round to nearest; per layer, an exact half goes up or down with equal probability.
    Random { seed: u64 },
}

impl Default for BandRounding {
    fn default() -> Self {
        BandRounding::Random { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_features: usize,
    /// Widths `D₂¹ … D₂ᴷ⁻¹` of the hidden layers.
    pub hidden_widths: Vec<usize>,
    /// Embedding width per feature; the last layer has `n_features × embed_width` outputs.
    pub embed_width: usize,
}

impl MaskSpec {
    pub fn new(n_features: usize, hidden_widths: Vec<usize>, embed_width: usize) -> Self {
        MaskSpec {
            n_features,
            hidden_widths,
            embed_width,
        }
    }

    pub fn output_width(&self) -> usize {
        self.n_features * self.embed_width
    }

    /// All layer output widths, last one included.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.hidden_widths.clone();
        w.push(self.output_width());
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::Config("mask spec needs at least one feature".into()));
        }
        if self.embed_width == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if let Some(w) = self.hidden_widths.iter().find(|&&w| w < self.n_features) {
            return Err(Error::Config(format!(
                "layer width {w} is smaller than the feature count {}",
                self.n_features
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub matrices: Vec<Matrix>,
    /// Per layer, the column band owned by each feature.
    pub bands: Vec<Vec<Range<usize>>>,
}

impl MaskStack {
    pub fn n_features(&self) -> usize {
        self.bands.first().map_or(0, Vec::len)
    }

    /// `M_1 · M_2 ⋯ M_K`.
    pub fn product(&self) -> Matrix {
        let mut it = self.matrices.iter();
        let first = it.next().expect("empty mask stack").clone();
        it.fold(first, |acc, m| acc.matmul(m).expect("mask chain shapes"))
    }

    /// Block values `γ_d` of the product (entry at the start of each final band).
    pub fn gamma(&self) -> Vec<f64> {
        let p = self.product();
        let last = self.bands.last().expect("empty mask stack");
        (0..self.n_features())
            .map(|d| p.get(d, last[d].start))
            .collect()
    }

    /// Checks the block invariant of the product and that no mask row is empty.
    pub fn check_block_structure(&self) -> bool {
        let p = self.product();
        let last = self.bands.last().expect("empty mask stack");
        for d in 0..p.rows() {
            let gamma = p.get(d, last[d].start);
            if gamma <= 0.0 || gamma.fract() != 0.0 {
                return false;
            }
            for l in 0..p.cols() {
                let inside = last[d].contains(&l);
                let v = p.get(d, l);
                if (inside && v != gamma) || (!inside && v != 0.0) {
                    return false;
                }
            }
        }
        self.matrices
            .iter()
            .all(|m| (0..m.rows()).all(|i| m.row(i).iter().any(|&v| v != 0.0)))
    }
}

/// Splits `width` columns into contiguous bands, one per feature.
///
/// The band width is `nint(width / n)`, lowered if needed so the last band,
/// which absorbs the remainder, stays non-empty.
pub(crate) fn band_ranges<R: Rng + ?Sized>(
    width: usize,
    n: usize,
    rounding: BandRounding,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let ratio = width as f64 / n as f64;
    let mut e = match rounding {
        BandRounding::Nearest {} => ratio.round() as usize,
        BandRounding::Random { .. } => {
            if ratio.fract() != 0.5 {
                ratio.round() as usize
            } else if rng.random_bool(0.5) {
                ratio.floor() as usize
            } else {
                ratio.ceil() as usize
            }
        }
    }
    .max(1);
    if n > 1 {
        e = e.min((width - 1) / (n - 1));
    }
    (0..n)
        .map(|d| {
            let start = d * e;
            let end = if d + 1 == n { width } else { (d + 1) * e };
            start..end
        })
        .collect()
}

/// Builds the mask stack for an input of `spec.n_features` scalar features.
pub fn build_mask_stack(spec: &MaskSpec, rounding: BandRounding) -> Result<MaskStack> {
    let owners: Vec<usize> = (0..spec.n_features).collect();
    build_mask_stack_for_inputs(spec, &owners, rounding)
}

/// Builds a mask stack where input column `i` belongs to feature `owners[i]`.
pub fn build_mask_stack_for_inputs(
    spec: &MaskSpec,
    owners: &[usize],
    rounding: BandRounding,
) -> Result<MaskStack> {
    spec.validate()?;
    let n = spec.n_features;
    if let Some(&o) = owners.iter().find(|&&o| o >= n) {
        return Err(Error::Config(format!("input owner {o} out of range for {n} features")));
    }
    if (0..n).any(|d| !owners.contains(&d)) {
        return Err(Error::Config("every feature must own at least one input column".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(match rounding {
        BandRounding::Nearest {} => 0,
        BandRounding::Random { seed } => seed,
    });

    // Reachability from each feature to the current layer's inputs.
    let mut reach = Matrix::from_fn(n, owners.len(), |d, i| f64::from(u8::from(owners[i] == d)));
    let widths = spec.widths();
    let last = widths.len() - 1;
    let mut matrices = Vec::with_capacity(widths.len());
    let mut all_bands = Vec::with_capacity(widths.len());
    for (k, &width) in widths.iter().enumerate() {
        let bands = if k == last {
            (0..n)
                .map(|d| d * spec.embed_width..(d + 1) * spec.embed_width)
                .collect()
        } else {
            band_ranges(width, n, rounding, &mut rng)
        };
        let mut m = Matrix::zeros(reach.cols(), width);
        for (d, band) in bands.iter().enumerate() {
            for l in band.clone() {
                for i in 0..reach.cols() {
                    if reach.get(d, i) > 0.0 {
                        m.set(i, l, 1.0);
                    }
                }
            }
        }
        reach = reach.matmul(&m)?;
        matrices.push(m);
        all_bands.push(bands);
    }
    Ok(MaskStack {
        matrices,
        bands: all_bands,
    })
}
