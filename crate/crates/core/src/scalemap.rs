//! Mapping fitted spectra to ordered, acquisition-unit-anchored
//! discretization steps.
//!
//! Each frequency band gets a representative frequency (its energy
//! centroid), band coordinates on the log-frequency axis, a mixed
//! position `m = (1-w)·p + w·t`, and an affine map onto
//! `[delta_min, delta_max]`. A hard descending sort with clamping
//! enforces the fast-to-slow hierarchy; the sort permutes values only,
//! so gradients stay defined almost everywhere.

use serde::{Deserialize, Serialize};

use crate::engine::Real;
use crate::error::{Error, Result};
use crate::spectral::{energy_centroid, PiecewiseFit};

/// How a band's mixed position is normalized onto the step range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaNormMode {
    /// `m = (1-w)·p + w·t` from band position and within-band position.
    PerBand,
    /// Centroid mapped directly onto the full log-frequency axis,
    /// ignoring band boundaries.
    Global,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleMapOptions {
    /// Mixing weight between band position and within-band position.
    pub w: f64,
    pub mode: DeltaNormMode,
    /// Step bounds as multiples of the acquisition step.
    pub delta_min_steps: f64,
    pub delta_max_steps: f64,
}

impl Default for ScaleMapOptions {
    fn default() -> Self {
        ScaleMapOptions { w: 0.3, mode: DeltaNormMode::PerBand, delta_min_steps: 0.1, delta_max_steps: 10.0 }
    }
}

impl ScaleMapOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::param(format!("mixing weight must lie in [0, 1], got {}", self.w)));
        }
        if !(0.0 < self.delta_min_steps && self.delta_min_steps < self.delta_max_steps) {
            return Err(Error::param(format!(
                "need 0 < delta_min < delta_max, got ({}, {})",
                self.delta_min_steps, self.delta_max_steps
            )));
        }
        Ok(())
    }

    pub fn delta_bounds(&self, acquisition_step: f64) -> (f64, f64) {
        (self.delta_min_steps * acquisition_step, self.delta_max_steps * acquisition_step)
    }
}

/// Per-band coordinates on the log-frequency axis, all clamped to
/// [0, 1]: `p` is the band's geometric-midpoint position over the full
/// range, `t` the centroid's position within the band, and `g` the
/// centroid's position over the full range (used by global mode).
#[derive(Debug, Clone, Copy)]
pub struct BandCoords<R> {
    pub p: R,
    pub t: R,
    pub g: R,
}

/// Ordered scale assignment: steps in acquisition units, fast to slow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleAssignment {
    /// `deltas[0] >= deltas[1] >= …`, all within the configured bounds.
    pub deltas: Vec<f64>,
    /// Representative frequency of the band feeding each scale.
    pub centroids: Vec<f64>,
    /// Frequency interval of the band feeding each scale.
    pub bands: Vec<(f64, f64)>,
    /// Original (ascending-frequency) band index feeding each scale.
    pub perm: Vec<usize>,
    pub mode: DeltaNormMode,
    pub w: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub acquisition_step: f64,
}

impl ScaleAssignment {
    pub fn k(&self) -> usize {
        self.deltas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() || self.deltas.len() != self.centroids.len() || self.deltas.len() != self.bands.len() {
            return Err(Error::param("scale assignment fields disagree on K"));
        }
        for w in self.deltas.windows(2) {
            if w[0] < w[1] - 1e-12 {
                return Err(Error::param(format!("steps must be ordered fast to slow: {:?}", self.deltas)));
            }
        }
        for &d in &self.deltas {
            if d < self.delta_min - 1e-9 || d > self.delta_max + 1e-9 {
                return Err(Error::param(format!("step {d} outside [{}, {}]", self.delta_min, self.delta_max)));
            }
        }
        for (c, (a, b)) in self.centroids.iter().zip(self.bands.iter()) {
            if !(a < c && c < b) {
                return Err(Error::param(format!("centroid {c} outside its band ({a}, {b})")));
            }
        }
        Ok(())
    }
}

/// Tape-compatible scale assignment before detachment.
pub struct ScaleBinding<R> {
    pub deltas: Vec<R>,
    pub centroids: Vec<R>,
    pub bands: Vec<(R, R)>,
    pub perm: Vec<usize>,
}

impl<R: Real> ScaleBinding<R> {
    pub fn detach(&self, opts: &ScaleMapOptions, acquisition_step: f64) -> ScaleAssignment {
        let (delta_min, delta_max) = opts.delta_bounds(acquisition_step);
        ScaleAssignment {
            deltas: self.deltas.iter().map(|d| d.val()).collect(),
            centroids: self.centroids.iter().map(|c| c.val()).collect(),
            bands: self.bands.iter().map(|(a, b)| (a.val(), b.val())).collect(),
            perm: self.perm.clone(),
            mode: opts.mode,
            w: opts.w,
            delta_min,
            delta_max,
            acquisition_step,
        }
    }
}

/// The K frequency bands a fit defines, in ascending frequency order.
pub fn fit_bands<R: Real>(fit: &PiecewiseFit<R>) -> Vec<(R, R)> {
    let proto = fit.betas[0];
    let mut edges: Vec<R> = Vec::with_capacity(fit.k() + 1);
    edges.push(proto.lit(fit.f_min));
    edges.extend(fit.knees.iter().copied());
    edges.push(proto.lit(fit.f_max));
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Band coordinates for one band with a given centroid.
pub fn band_coordinates<R: Real>(band: (R, R), centroid: R, f_min: f64, f_max: f64) -> Result<BandCoords<R>> {
    let (fa, fb) = band;
    if !(fa.val() > 0.0 && fa.val() < fb.val()) {
        return Err(Error::param(format!("degenerate band ({}, {})", fa.val(), fb.val())));
    }
    let range = f_max.ln() - f_min.ln();
    let la = fa.ln();
    let lb = fb.ln();
    let lmid = (la + lb) * fa.lit(0.5);
    let p = ((lmid - fa.lit(f_min.ln())) * fa.lit(1.0 / range)).clampc(0.0, 1.0);
    let t = ((centroid.ln() - la) / (lb - la)).clampc(0.0, 1.0);
    let g = ((centroid.ln() - fa.lit(f_min.ln())) * fa.lit(1.0 / range)).clampc(0.0, 1.0);
    Ok(BandCoords { p, t, g })
}

/// Maps band coordinates to a step value (before ordering): the mixed
/// position `m` is affine-mapped onto `[delta_min, delta_max]`.
/// Monotone nondecreasing in the centroid for both modes.
pub fn map_delta<R: Real>(coords: &BandCoords<R>, opts: &ScaleMapOptions, acquisition_step: f64) -> Result<R> {
    opts.validate()?;
    let (dmin, dmax) = opts.delta_bounds(acquisition_step);
    let m = match opts.mode {
        DeltaNormMode::PerBand => coords.p * coords.p.lit(1.0 - opts.w) + coords.t * coords.t.lit(opts.w),
        DeltaNormMode::Global => coords.g,
    };
    Ok(m.lit(dmin) + m * m.lit(dmax - dmin))
}

/// Hard descending sort of the steps, carrying bands and centroids
/// through the same permutation (ties keep the original band order),
/// then a clamp to the step bounds. Scale 1 ends up bound to the
/// highest-centroid band whenever the upstream map is monotone.
pub fn enforce_order<R: Real>(
    deltas: Vec<R>,
    centroids: Vec<R>,
    bands: Vec<(R, R)>,
    delta_min: f64,
    delta_max: f64,
) -> ScaleBinding<R> {
    let k = deltas.len();
    let mut idx: Vec<usize> = (0..k).collect();
    // stable sort: descending by value, ties by original band order
    idx.sort_by(|&a, &b| deltas[b].val().partial_cmp(&deltas[a].val()).unwrap());
    let deltas: Vec<R> = idx.iter().map(|&i| deltas[i].clampc(delta_min, delta_max)).collect();
    let centroids: Vec<R> = idx.iter().map(|&i| centroids[i]).collect();
    let bands: Vec<(R, R)> = idx.iter().map(|&i| bands[i]).collect();
    ScaleBinding { deltas, centroids, bands, perm: idx }
}

/// Full pipeline from a fitted spectrum to an ordered scale binding:
/// bands, energy centroids, coordinates, step mapping, ordering.
pub fn assign_scales<R: Real>(
    fit: &PiecewiseFit<R>,
    opts: &ScaleMapOptions,
    acquisition_step: f64,
) -> Result<ScaleBinding<R>> {
    opts.validate()?;
    let bands = fit_bands(fit);
    let mut centroids = Vec::with_capacity(bands.len());
    let mut deltas = Vec::with_capacity(bands.len());
    for (i, &(fa, fb)) in bands.iter().enumerate() {
        let c = energy_centroid(fa, fb, fit.betas[i])?;
        let coords = band_coordinates((fa, fb), c, fit.f_min, fit.f_max)?;
        deltas.push(map_delta(&coords, opts, acquisition_step)?);
        centroids.push(c);
    }
    let (dmin, dmax) = opts.delta_bounds(acquisition_step);
    Ok(enforce_order(deltas, centroids, bands, dmin, dmax))
}

/// Anchoring penalty `lambda * mean_k (ln(delta_k / step))^2`: zero
/// exactly when every step equals one acquisition step.
pub fn delta_anchor_loss<R: Real>(deltas: &[R], acquisition_step: f64, lambda: f64) -> Result<R> {
    if deltas.is_empty() {
        return Err(Error::param("no steps to anchor"));
    }
    if !(acquisition_step > 0.0) {
        return Err(Error::param("acquisition step must be positive"));
    }
    let proto = deltas[0];
    let mut acc = proto.lit(0.0);
    for d in deltas {
        if d.val() <= 0.0 {
            return Err(Error::param(format!("step must be positive, got {}", d.val())));
        }
        let r = d.ln() - proto.lit(acquisition_step.ln());
        acc = acc + r * r;
    }
    Ok(acc * proto.lit(lambda / deltas.len() as f64))
}

/// Effective decay timescale `delta / |a|` of a discretized head, in
/// acquisition units. Requires a stable (negative) continuous-time
/// decay.
pub fn effective_timescale(delta: f64, a: f64) -> Result<f64> {
    if a >= 0.0 {
        return Err(Error::param(format!("unstable mode: need A < 0, got {a}")));
    }
    if !(delta > 0.0) {
        return Err(Error::param(format!("step must be positive, got {delta}")));
    }
    Ok(delta / a.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(p: f64, t: f64, g: f64) -> BandCoords<f64> {
        BandCoords { p, t, g }
    }

    #[test]
    fn band_coordinate_boundary_cases() {
        // lowest band with centroid at f_min -> t = 0
        let c = band_coordinates((0.01, 0.05), 0.01, 0.01, 0.5).unwrap();
        assert!(c.t.abs() < 1e-12);
        // band equal to the whole range -> p = 0.5
        let c = band_coordinates((0.01, 0.5), 0.1, 0.01, 0.5).unwrap();
        assert!((c.p - 0.5).abs() < 1e-12);
        // centroid at the geometric midpoint -> t = 0.5
        let mid = (0.01f64 * 0.05).sqrt();
        let c = band_coordinates((0.01, 0.05), mid, 0.01, 0.5).unwrap();
        assert!((c.t - 0.5).abs() < 1e-12);
        assert!(band_coordinates((0.05, 0.05), 0.05, 0.01, 0.5).is_err());
    }

    #[test]
    fn map_delta_mixing_and_endpoints() {
        let step = 1.0;
        let mut opts = ScaleMapOptions { w: 0.0, ..Default::default() };
        // w = 0 -> m = p exactly
        let d = map_delta(&coords(0.4, 0.9, 0.7), &opts, step).unwrap();
        let (dmin, dmax) = opts.delta_bounds(step);
        assert!((d - (dmin + 0.4 * (dmax - dmin))).abs() < 1e-12);
        // m = 1 -> delta_max, m = 0 -> delta_min
        opts.w = 1.0;
        assert!((map_delta(&coords(0.0, 1.0, 0.0), &opts, step).unwrap() - dmax).abs() < 1e-12);
        assert!((map_delta(&coords(1.0, 0.0, 0.0), &opts, step).unwrap() - dmin).abs() < 1e-12);
        // default mixing: m = 0.7 p + 0.3 t
        opts.w = 0.3;
        let d = map_delta(&coords(0.5, 1.0, 0.2), &opts, step).unwrap();
        let m = 0.7 * 0.5 + 0.3 * 1.0;
        assert!((d - (dmin + m * (dmax - dmin))).abs() < 1e-12);
        opts.w = 1.5;
        assert!(map_delta(&coords(0.5, 0.5, 0.5), &opts, step).is_err());
    }

    #[test]
    fn global_and_per_band_agree_at_w_zero_with_midpoint_centroids() {
        // with the centroid at the band's geometric midpoint, g equals
        // p, so per-band mixing at w = 0 coincides with global mode
        let band = (0.02, 0.18);
        let mid = (band.0 * band.1).sqrt();
        let c = band_coordinates(band, mid, 0.004, 0.5).unwrap();
        assert!((c.g - c.p).abs() < 1e-12);
        let per = map_delta(&c, &ScaleMapOptions { w: 0.0, ..Default::default() }, 1.0).unwrap();
        let glob = map_delta(
            &c,
            &ScaleMapOptions { mode: DeltaNormMode::Global, ..Default::default() },
            1.0,
        )
        .unwrap();
        assert!((per - glob).abs() < 1e-12);
    }

    #[test]
    fn enforce_order_sorts_and_records_permutation() {
        let b = |i: f64| (0.01 * i, 0.01 * i + 0.005);
        let bands = vec![b(1.0), b(2.0), b(3.0)];
        let centroids = vec![0.012, 0.022, 0.032];
        let sorted = enforce_order(vec![0.2, 0.9, 0.5], centroids.clone(), bands.clone(), 0.1, 10.0);
        assert_eq!(sorted.deltas, vec![0.9, 0.5, 0.2]);
        assert_eq!(sorted.perm, vec![1, 2, 0]);
        // already descending is unchanged
        let same = enforce_order(vec![0.9, 0.5, 0.2], centroids.clone(), bands.clone(), 0.1, 10.0);
        assert_eq!(same.perm, vec![0, 1, 2]);
        // ties keep original band order
        let tied = enforce_order(vec![0.5, 0.5, 0.5], centroids, bands, 0.1, 10.0);
        assert_eq!(tied.perm, vec![0, 1, 2]);
    }

    #[test]
    fn anchor_loss_values() {
        let z = delta_anchor_loss(&[1.0, 1.0, 1.0], 1.0, 0.1).unwrap();
        assert!(z.abs() < 1e-15);
        let e = std::f64::consts::E;
        let one = delta_anchor_loss(&[e], 1.0, 1.0).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        assert!(delta_anchor_loss(&[-1.0], 1.0, 0.1).is_err());
    }

    #[test]
    fn effective_timescale_values() {
        assert_eq!(effective_timescale(1.0, -1.0).unwrap(), 1.0);
        assert_eq!(effective_timescale(2.0, -0.5).unwrap(), 4.0);
        // physical-unit case at a 0.72 s acquisition step
        let tau = effective_timescale(0.72, -1.0 / 7.2).unwrap();
        assert!((tau - 5.184).abs() < 1e-12);
        assert!(effective_timescale(1.0, 0.0).is_err());
    }

    #[test]
    fn assigned_scales_satisfy_invariants_for_random_fits() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opts = ScaleMapOptions::default();
        for _ in 0..2000 {
            let f_min = rng.gen_range(0.002..0.01);
            let f_max = rng.gen_range(0.3..0.5);
            let l0 = f_min.ln();
            let l1 = f_max.ln();
            let mut us: Vec<f64> = (0..2).map(|_| rng.gen_range(0.02..0.98)).collect();
            us.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if us[1] - us[0] < 0.02 {
                continue;
            }
            let fit = PiecewiseFit {
                knees: us.iter().map(|u| (l0 + u * (l1 - l0)).exp()).collect(),
                betas: (0..3).map(|_| rng.gen_range(0.3..5.0)).collect(),
                log_amplitudes: vec![0.0; 3],
                f_min,
                f_max,
            };
            let binding = assign_scales(&fit, &opts, 0.72).unwrap();
            binding.detach(&opts, 0.72).validate().unwrap();
        }
    }

    #[test]
    fn raising_a_centroid_never_lowers_its_rank() {
        // monotonicity of map + sort in one band's centroid
        let opts = ScaleMapOptions::default();
        let f_min = 0.004;
        let f_max = 0.5;
        let bands = vec![(0.004, 0.02), (0.02, 0.1), (0.1, 0.5)];
        let base_c = [0.008, 0.05, 0.2];
        let deltas_for = |cs: &[f64; 3]| -> Vec<f64> {
            let ds: Vec<f64> = bands
                .iter()
                .zip(cs.iter())
                .map(|(&b, &c)| {
                    let co = band_coordinates(b, c, f_min, f_max).unwrap();
                    map_delta(&co, &opts, 1.0).unwrap()
                })
                .collect();
            enforce_order(ds, cs.to_vec(), bands.clone(), 0.1, 10.0).deltas
        };
        let before = deltas_for(&base_c);
        let mut raised = base_c;
        raised[1] = 0.09; // push band 2's centroid up within its band
        let after = deltas_for(&raised);
        // band 2's step can only move toward the fast end
        let rank_before = before.iter().position(|&d| {
            let co = band_coordinates(bands[1], base_c[1], f_min, f_max).unwrap();
            (d - map_delta(&co, &opts, 1.0).unwrap()).abs() < 1e-12
        });
        let rank_after = after.iter().position(|&d| {
            let co = band_coordinates(bands[1], raised[1], f_min, f_max).unwrap();
            (d - map_delta(&co, &opts, 1.0).unwrap()).abs() < 1e-12
        });
        assert!(rank_after.unwrap() <= rank_before.unwrap());
    }
}
