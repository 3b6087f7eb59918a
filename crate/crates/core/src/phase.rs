//! Fringe pattern synthesis, N-step phase retrieval, Gray-code fringe-order
//! decoding and phase unwrapping.
//!
//! Fringe coordinates follow the projector pixel grid: the phase of the
//! pattern at coordinate `c` is `2π c / λ`, so period `k` spans
//! `[kλ, (k+1)λ)`. Gray-code boundaries therefore coincide with zeros of the
//! wrapped phase; an extra complementary pattern at half-period resolution
//! resolves the pixels on either side of those boundaries.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Default modulation floor below which a pixel is considered unlit.
pub const DEFAULT_MIN_MODULATION: f64 = 0.02;
/// Default minimum distance of a Gray capture from its mid-level.
pub const DEFAULT_CONTRAST_FLOOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Stripes vary along the column axis and encode the projector column.
    #[default]
    Vertical,
    /// Stripes vary along the row axis.
    Horizontal,
}

impl Orientation {
    #[inline]
    pub fn coord(self, x: usize, y: usize) -> f64 {
        match self {
            Orientation::Vertical => x as f64,
            Orientation::Horizontal => y as f64,
        }
    }

    pub fn extent(self, width: usize, height: usize) -> usize {
        match self {
            Orientation::Vertical => width,
            Orientation::Horizontal => height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseParams {
    /// Fringe width in projector pixels.
    pub wavelength: f64,
    /// Number of phase-shift steps.
    pub steps: usize,
    pub background: f64,
    pub amplitude: f64,
    pub min_modulation: f64,
    pub contrast_floor: f64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self {
            wavelength: 18.0,
            steps: 4,
            background: 0.5,
            amplitude: 0.4,
            min_modulation: DEFAULT_MIN_MODULATION,
            contrast_floor: DEFAULT_CONTRAST_FLOOR,
        }
    }
}

impl PhaseParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 3 {
            return Err(Error::InsufficientSteps(self.steps));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::Input(format!(
                "fringe width must be positive, got {}",
                self.wavelength
            )));
        }
        if !(self.amplitude >= 0.0
            && self.amplitude <= self.background
            && self.background + self.amplitude <= 1.0)
        {
            return Err(Error::Input(format!(
                "need 0 <= b <= a and a + b <= 1 (a={}, b={})",
                self.background, self.amplitude
            )));
        }
        Ok(())
    }
}

/// Shift of step `step` (0-based) in an `steps`-step set.
#[inline]
pub fn phase_shift(step: usize, steps: usize) -> f64 {
    TAU * step as f64 / steps as f64
}

#[inline]
pub fn fringe_intensity(
    coord: f64,
    wavelength: f64,
    background: f64,
    amplitude: f64,
    shift: f64,
) -> f64 {
    background + amplitude * (TAU * coord / wavelength - shift).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FringePattern {
    pub image: Image,
    /// 0-based step index.
    pub step: usize,
    pub phase_shift: f64,
}

pub fn generate_phase_patterns(
    width: usize,
    height: usize,
    params: &PhaseParams,
    orientation: Orientation,
) -> Result<Vec<FringePattern>> {
    params.validate()?;
    Ok((0..params.steps)
        .map(|step| {
            let shift = phase_shift(step, params.steps);
            let image = Image::from_fn(width, height, |x, y| {
                fringe_intensity(
                    orientation.coord(x, y),
                    params.wavelength,
                    params.background,
                    params.amplitude,
                    shift,
                )
            });
            FringePattern {
                image,
                step,
                phase_shift: shift,
            }
        })
        .collect())
}

/// Wrapped phase, modulation and validity per camera pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap {
    pub width: usize,
    pub height: usize,
    /// Radians in (-π, π]; NaN where invalid.
    pub wrapped: Vec<f64>,
    pub modulation: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PhaseMap {
    pub fn get(&self, i: usize) -> Option<f64> {
        self.valid[i].then_some(self.wrapped[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Maps an angle into (-π, π].
#[inline]
pub fn wrap_angle(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(TAU);
    if p > PI {
        p -= TAU;
    }
    p
}

/// Per-pixel least-squares phase from `sum I sin δ` and `sum I cos δ`.
/// Returns (wrapped phase, modulation estimate).
#[inline]
pub fn retrieve_phase(intensities: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for (value, shift) in intensities {
        s += value * shift.sin();
        c += value * shift.cos();
        n += 1;
    }
    let mut phi = s.atan2(c);
    if phi <= -PI {
        phi = PI;
    }
    let modulation = 2.0 / n as f64 * s.hypot(c);
    (phi, modulation)
}

/// N-step retrieval with the canonical shifts `2π n / N`.
pub fn compute_wrapped_phase(patterns: &[FringePattern], min_modulation: f64) -> Result<PhaseMap> {
    let n = patterns.len();
    if n < 3 {
        return Err(Error::InsufficientSteps(n));
    }
    let first = &patterns[0].image;
    if patterns.iter().any(|p| !p.image.same_size(first)) {
        return Err(Error::Input("phase-shift images differ in size".into()));
    }
    for (k, p) in patterns.iter().enumerate() {
        if (wrap_angle(p.phase_shift - phase_shift(k, n))).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "pattern {k} has shift {} but the canonical {n}-step shift is {}",
                p.phase_shift,
                phase_shift(k, n)
            )));
        }
    }
    let shifts: Vec<(f64, f64)> = patterns
        .iter()
        .map(|p| (p.phase_shift.sin(), p.phase_shift.cos()))
        .collect();
    let len = first.len();
    let results: Vec<(f64, f64)> = (0..len)
        .into_par_iter()
        .map(|i| {
            let (mut s, mut c) = (0.0, 0.0);
            for (p, (sn, cs)) in patterns.iter().zip(&shifts) {
                let v = p.image.data[i];
                s += v * sn;
                c += v * cs;
            }
            let mut phi = s.atan2(c);
            if phi <= -PI {
                phi = PI;
            }
            (phi, 2.0 / n as f64 * s.hypot(c))
        })
        .collect();
    let mut wrapped = Vec::with_capacity(len);
    let mut modulation = Vec::with_capacity(len);
    let mut valid = Vec::with_capacity(len);
    for (phi, m) in results {
        let ok = m.is_finite() && m >= min_modulation && m > 0.0;
        wrapped.push(if ok { phi } else { f64::NAN });
        modulation.push(m);
        valid.push(ok);
    }
    Ok(PhaseMap {
        width: first.width,
        height: first.height,
        wrapped,
        modulation,
        valid,
    })
}

/// Convenience wrapper for captured images in canonical shift order.
pub fn wrapped_phase_from_images(images: &[Image], min_modulation: f64) -> Result<PhaseMap> {
    let n = images.len();
    let patterns: Vec<FringePattern> = images
        .iter()
        .enumerate()
        .map(|(k, img)| FringePattern {
            image: img.clone(),
            step: k,
            phase_shift: phase_shift(k, n.max(1)),
        })
        .collect();
    compute_wrapped_phase(&patterns, min_modulation)
}

// ---------------------------------------------------------------------------
// Gray code

#[inline]
pub fn gray_encode(k: u32) -> u32 {
    k ^ (k >> 1)
}

#[inline]
pub fn gray_decode(mut g: u32) -> u32 {
    let mut k = g;
    while g > 1 {
        g >>= 1;
        k ^= g;
    }
    k
}

/// Number of fringe periods covering `extent` pixels.
pub fn period_count(extent: usize, wavelength: f64) -> u32 {
    ((extent as f64 / wavelength).ceil() as u32).max(1)
}

/// Number of Gray patterns needed to label `periods` periods.
pub fn gray_bit_count(periods: u32) -> usize {
    if periods <= 1 {
        0
    } else {
        (32 - (periods - 1).leading_zeros()) as usize
    }
}

/// Period index of a continuous fringe coordinate.
#[inline]
pub fn period_index(coord: f64, wavelength: f64) -> u32 {
    (coord / wavelength).floor().max(0.0) as u32
}

/// Half-period index of a continuous fringe coordinate.
#[inline]
pub fn half_period_index(coord: f64, wavelength: f64) -> u32 {
    (2.0 * coord / wavelength).floor().max(0.0) as u32
}

/// Value (0 or 1) of Gray pattern `m` (0 = most significant) at `coord`.
#[inline]
pub fn gray_pattern_bit(coord: f64, wavelength: f64, bits: usize, m: usize) -> bool {
    let g = gray_encode(period_index(coord, wavelength));
    (g >> (bits - 1 - m)) & 1 == 1
}

/// Value of the complementary pattern: least significant bit of the Gray
/// code of the half-period index.
#[inline]
pub fn complementary_bit(coord: f64, wavelength: f64) -> bool {
    gray_encode(half_period_index(coord, wavelength)) & 1 == 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPattern {
    pub image: Image,
    /// Bit position, 0 = most significant.
    pub bit: usize,
}

/// Gray-code patterns labelling each fringe period, most significant first.
/// Returns no patterns when a single period covers the extent.
pub fn generate_gray_code_patterns(
    width: usize,
    height: usize,
    wavelength: f64,
    orientation: Orientation,
) -> Result<Vec<BinaryPattern>> {
    if !(wavelength > 0.0) {
        return Err(Error::Input("fringe width must be positive".into()));
    }
    let periods = period_count(orientation.extent(width, height), wavelength);
    let bits = gray_bit_count(periods);
    Ok((0..bits)
        .map(|m| BinaryPattern {
            image: Image::from_fn(width, height, |x, y| {
                gray_pattern_bit(orientation.coord(x, y), wavelength, bits, m) as u8 as f64
            }),
            bit: m,
        })
        .collect())
}

/// The extra half-period pattern appended after the Gray patterns.
pub fn generate_complementary_pattern(
    width: usize,
    height: usize,
    wavelength: f64,
    orientation: Orientation,
) -> BinaryPattern {
    let bits = gray_bit_count(period_count(orientation.extent(width, height), wavelength));
    BinaryPattern {
        image: Image::from_fn(width, height, |x, y| {
            complementary_bit(orientation.coord(x, y), wavelength) as u8 as f64
        }),
        bit: bits,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FringeOrderMap {
    pub width: usize,
    pub height: usize,
    pub order: Vec<u32>,
    pub valid: Vec<bool>,
    /// Number of encoded levels; valid orders lie in `0..levels`.
    pub levels: u32,
}

impl FringeOrderMap {
    /// Uniform order map, e.g. for the single-period case.
    pub fn constant(width: usize, height: usize, order: u32) -> Self {
        Self {
            width,
            height,
            order: vec![order; width * height],
            valid: vec![true; width * height],
            levels: order + 1,
        }
    }

    pub fn get(&self, i: usize) -> Option<u32> {
        self.valid[i].then_some(self.order[i])
    }
}

/// Thresholds each capture against the per-pixel mid level and Gray-decodes
/// the resulting bit vector (most significant capture first).
pub fn decode_fringe_order(
    captures: &[Image],
    black: &Image,
    white: &Image,
    levels: u32,
    contrast_floor: f64,
) -> Result<FringeOrderMap> {
    if !black.same_size(white) || captures.iter().any(|c| !c.same_size(black)) {
        return Err(Error::Input("Gray captures differ in size".into()));
    }
    if captures.len() > 31 {
        return Err(Error::Input("too many Gray captures".into()));
    }
    let len = black.len();
    let decoded: Vec<(u32, bool)> = (0..len)
        .into_par_iter()
        .map(|i| {
            let mid = 0.5 * (black.data[i] + white.data[i]);
            let mut ok = white.data[i] - black.data[i] >= 2.0 * contrast_floor;
            let mut g = 0u32;
            for c in captures {
                let v = c.data[i];
                if (v - mid).abs() < contrast_floor {
                    ok = false;
                }
                g = (g << 1) | (v > mid) as u32;
            }
            let k = gray_decode(g);
            (k, ok && k < levels)
        })
        .collect();
    let (order, valid) = decoded.into_iter().unzip();
    Ok(FringeOrderMap {
        width: black.width,
        height: black.height,
        order,
        valid,
        levels,
    })
}

/// Combines a half-period order map with the wrapped phase into the order
/// that satisfies `Φ = φ + 2πK`.
///
/// Near period boundaries (|φ| ≤ π/2) the half-period-shifted index
/// `(h + 1) / 2` is stable; near the phase wrap (|φ| > π/2) the period
/// index `h / 2` is, bumped by one on the negative side.
pub fn align_fringe_order(
    wrapped: &PhaseMap,
    half_periods: &FringeOrderMap,
) -> Result<FringeOrderMap> {
    if wrapped.width != half_periods.width || wrapped.height != half_periods.height {
        return Err(Error::Input("phase and order maps differ in size".into()));
    }
    let len = wrapped.wrapped.len();
    let mut order = vec![0u32; len];
    let mut valid = vec![false; len];
    for i in 0..len {
        if let (Some(phi), Some(h)) = (wrapped.get(i), half_periods.get(i)) {
            let k = h / 2;
            order[i] = if phi.abs() <= PI / 2.0 {
                (h + 1) / 2
            } else if phi > 0.0 {
                k
            } else {
                k + 1
            };
            valid[i] = true;
        }
    }
    Ok(FringeOrderMap {
        width: wrapped.width,
        height: wrapped.height,
        order,
        valid,
        levels: half_periods.levels.div_ceil(2) + 1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsolutePhaseMap {
    pub width: usize,
    pub height: usize,
    /// Radians; NaN where invalid.
    pub phase: Vec<f64>,
    pub valid: Vec<bool>,
    pub wavelength: f64,
}

impl AbsolutePhaseMap {
    pub fn get(&self, i: usize) -> Option<f64> {
        self.valid[i].then_some(self.phase[i])
    }

    /// Projector coordinate per pixel; `None` for invalid or out-of-range.
    pub fn projector_coords(&self, projector_extent: usize) -> Vec<Option<f64>> {
        self.phase
            .iter()
            .zip(&self.valid)
            .map(|(&p, &ok)| {
                if !ok {
                    return None;
                }
                let u = phase_to_projector_coord(p, self.wavelength);
                projector_coord_in_range(u, projector_extent).then_some(u)
            })
            .collect()
    }
}

/// `Φ = φ + 2πK` on the intersection of both masks.
pub fn unwrap_phase(
    wrapped: &PhaseMap,
    orders: &FringeOrderMap,
    wavelength: f64,
) -> Result<AbsolutePhaseMap> {
    if wrapped.width != orders.width || wrapped.height != orders.height {
        return Err(Error::Input("phase and order maps differ in size".into()));
    }
    let len = wrapped.wrapped.len();
    let mut phase = vec![f64::NAN; len];
    let mut valid = vec![false; len];
    for i in 0..len {
        if let (Some(phi), Some(k)) = (wrapped.get(i), orders.get(i)) {
            phase[i] = phi + TAU * k as f64;
            valid[i] = true;
        }
    }
    Ok(AbsolutePhaseMap {
        width: wrapped.width,
        height: wrapped.height,
        phase,
        valid,
        wavelength,
    })
}

#[inline]
pub fn phase_to_projector_coord(phase: f64, wavelength: f64) -> f64 {
    phase * wavelength / TAU
}

#[inline]
pub fn projector_coord_in_range(u_p: f64, extent: usize) -> bool {
    u_p.is_finite() && u_p >= 0.0 && u_p < extent as f64
}

/// Captured structured-light stack for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureStack {
    pub phase: Vec<Image>,
    pub gray: Vec<Image>,
    pub complement: Image,
    pub black: Image,
    pub white: Image,
}

impl CaptureStack {
    pub fn width(&self) -> usize {
        self.white.width
    }

    pub fn height(&self) -> usize {
        self.white.height
    }

    /// Texture image (the fully lit capture).
    pub fn texture(&self) -> &Image {
        &self.white
    }

    /// Wrapped phase, Gray decoding with the complementary pattern, and
    /// unwrapping.
    pub fn absolute_phase(
        &self,
        params: &PhaseParams,
        projector_extent: usize,
    ) -> Result<AbsolutePhaseMap> {
        let wrapped = wrapped_phase_from_images(&self.phase, params.min_modulation)?;
        let periods = period_count(projector_extent, params.wavelength);
        let mut captures = self.gray.clone();
        captures.push(self.complement.clone());
        let half = decode_fringe_order(
            &captures,
            &self.black,
            &self.white,
            2 * periods,
            params.contrast_floor,
        )?;
        let orders = align_fringe_order(&wrapped, &half)?;
        unwrap_phase(&wrapped, &orders, params.wavelength)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn four_step_intensities_at_zero_phase() {
        let params = PhaseParams {
            steps: 4,
            background: 0.5,
            amplitude: 0.4,
            ..Default::default()
        };
        let pats = generate_phase_patterns(3, 1, &params, Orientation::Vertical).unwrap();
        let values: Vec<f64> = pats.iter().map(|p| p.image.get(0, 0)).collect();
        for (v, e) in values.iter().zip([0.9, 0.5, 0.1, 0.5]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn three_step_shifts() {
        let params = PhaseParams {
            steps: 3,
            ..Default::default()
        };
        let pats = generate_phase_patterns(2, 2, &params, Orientation::Vertical).unwrap();
        let shifts: Vec<f64> = pats.iter().map(|p| p.phase_shift).collect();
        assert_eq!(shifts, vec![0.0, TAU / 3.0, 2.0 * TAU / 3.0]);
    }

    #[test]
    fn too_few_steps_rejected() {
        let params = PhaseParams {
            steps: 2,
            ..Default::default()
        };
        assert!(matches!(
            generate_phase_patterns(4, 4, &params, Orientation::Vertical),
            Err(Error::InsufficientSteps(2))
        ));
        let img = Image::new(2, 2);
        assert!(matches!(
            wrapped_phase_from_images(&[img.clone(), img], 0.02),
            Err(Error::InsufficientSteps(2))
        ));
    }

    #[test]
    fn zero_phase_from_four_step_values() {
        let (phi, m) = retrieve_phase(
            [0.9, 0.5, 0.1, 0.5]
                .into_iter()
                .enumerate()
                .map(|(k, v)| (v, phase_shift(k, 4))),
        );
        assert!(phi.abs() < 1e-15);
        assert!((m - 0.4).abs() < 1e-15);
    }

    #[test]
    fn generate_then_retrieve() {
        for &n in &[3usize, 4, 8] {
            let phi_star = 1.234;
            let values = (0..n).map(|k| {
                (
                    0.5 + 0.3 * (phi_star - phase_shift(k, n)).cos(),
                    phase_shift(k, n),
                )
            });
            let (phi, _) = retrieve_phase(values);
            assert!((phi - phi_star).abs() < 1e-10, "N={n}: {phi}");
        }
    }

    #[test]
    fn constant_images_are_invalid() {
        let params = PhaseParams {
            amplitude: 0.0,
            ..Default::default()
        };
        let pats = generate_phase_patterns(4, 3, &params, Orientation::Vertical).unwrap();
        let map = compute_wrapped_phase(&pats, DEFAULT_MIN_MODULATION).unwrap();
        assert_eq!(map.valid_count(), 0);
        assert!(map.wrapped.iter().all(|p| p.is_nan()));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = Image::new(3, 3);
        let b = Image::new(3, 4);
        assert!(matches!(
            wrapped_phase_from_images(&[a.clone(), a, b], 0.02),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn wrapped_range_is_half_open() {
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn gray_small_case() {
        let pats = generate_gray_code_patterns(8, 1, 2.0, Orientation::Vertical).unwrap();
        assert_eq!(pats.len(), 2);
        let codes: Vec<(u8, u8)> = (0..4)
            .map(|period| {
                let x = period * 2;
                (pats[0].image.get(x, 0) as u8, pats[1].image.get(x, 0) as u8)
            })
            .collect();
        assert_eq!(codes, vec![(0, 0), (0, 1), (1, 1), (1, 0)]);
    }

    #[test]
    fn gray_pattern_count_for_full_width_projector() {
        // ceil(912 / 18) = 51 periods; 2^5 = 32 < 51 <= 64 = 2^6
        assert_eq!(period_count(912, 18.0), 51);
        assert_eq!(gray_bit_count(51), 6);
        let pats = generate_gray_code_patterns(912, 1, 18.0, Orientation::Vertical).unwrap();
        assert_eq!(pats.len(), 6);
    }

    #[test]
    fn single_period_has_no_gray_patterns() {
        assert!(
            generate_gray_code_patterns(16, 4, 16.0, Orientation::Vertical)
                .unwrap()
                .is_empty()
        );
        assert!(
            generate_gray_code_patterns(16, 4, 40.0, Orientation::Vertical)
                .unwrap()
                .is_empty()
        );
        let black = Image::new(16, 4);
        let white = Image::filled(16, 4, 1.0);
        let k = decode_fringe_order(&[], &black, &white, 1, 0.02).unwrap();
        assert!(k.order.iter().all(|&o| o == 0));
        assert!(k.valid.iter().all(|&v| v));
    }

    #[test]
    fn gray_adjacent_codes_differ_by_one_bit() {
        for k in 0..4096u32 {
            assert_eq!((gray_encode(k) ^ gray_encode(k + 1)).count_ones(), 1);
            assert_eq!(gray_decode(gray_encode(k)), k);
        }
    }

    fn bits_to_captures(bits: &[u8]) -> Vec<Image> {
        bits.iter()
            .map(|&b| Image::filled(1, 1, b as f64))
            .collect()
    }

    #[test]
    fn decode_small_codes() {
        let black = Image::new(1, 1);
        let white = Image::filled(1, 1, 1.0);
        let k = decode_fringe_order(&bits_to_captures(&[0, 0]), &black, &white, 4, 0.02).unwrap();
        assert_eq!(k.get(0), Some(0));
        let k = decode_fringe_order(&bits_to_captures(&[1, 0]), &black, &white, 4, 0.02).unwrap();
        assert_eq!(k.get(0), Some(3));
    }

    #[test]
    fn low_contrast_pixel_invalid() {
        let black = Image::filled(1, 1, 0.4);
        let white = Image::filled(1, 1, 0.6);
        let cap = Image::filled(1, 1, 0.51);
        let k = decode_fringe_order(&[cap], &black, &white, 2, 0.02).unwrap();
        assert_eq!(k.get(0), None);
    }

    #[test]
    fn unwrap_arithmetic() {
        let wrapped = PhaseMap {
            width: 2,
            height: 1,
            wrapped: vec![-PI / 2.0, 0.3],
            modulation: vec![1.0, 1.0],
            valid: vec![true, true],
        };
        let orders = FringeOrderMap {
            width: 2,
            height: 1,
            order: vec![2, 0],
            valid: vec![true, true],
            levels: 4,
        };
        let abs = unwrap_phase(&wrapped, &orders, 18.0).unwrap();
        assert_eq!(abs.phase[0], TAU * 2.0 - PI / 2.0);
        assert_eq!(abs.phase[1], 0.3);
    }

    #[test]
    fn projector_coordinate_examples() {
        assert!((phase_to_projector_coord(4.0 * PI, 18.0) - 36.0).abs() < 1e-12);
        assert_eq!(phase_to_projector_coord(0.0, 18.0), 0.0);
        assert!(!projector_coord_in_range(-0.1, 456));
        assert!(!projector_coord_in_range(456.0, 456));
    }

    /// Renders a full stack directly from a projector coordinate per pixel.
    fn stack_for_coords(
        coords: &[f64],
        params: &PhaseParams,
        extent: usize,
        noise: f64,
        seed: u64,
    ) -> CaptureStack {
        let w = coords.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut noisy = |v: f64| {
            if noise > 0.0 {
                v + normal.sample(&mut rng)
            } else {
                v
            }
        };
        let bits = gray_bit_count(period_count(extent, params.wavelength));
        let phase = (0..params.steps)
            .map(|k| {
                let d = phase_shift(k, params.steps);
                Image {
                    width: w,
                    height: 1,
                    data: coords
                        .iter()
                        .map(|&c| {
                            noisy(fringe_intensity(
                                c,
                                params.wavelength,
                                params.background,
                                params.amplitude,
                                d,
                            ))
                        })
                        .collect(),
                }
            })
            .collect();
        let gray = (0..bits)
            .map(|m| Image {
                width: w,
                height: 1,
                data: coords
                    .iter()
                    .map(|&c| noisy(gray_pattern_bit(c, params.wavelength, bits, m) as u8 as f64))
                    .collect(),
            })
            .collect();
        let complement = Image {
            width: w,
            height: 1,
            data: coords
                .iter()
                .map(|&c| noisy(complementary_bit(c, params.wavelength) as u8 as f64))
                .collect(),
        };
        let black = Image {
            width: w,
            height: 1,
            data: coords.iter().map(|_| noisy(0.0)).collect(),
        };
        let white = Image {
            width: w,
            height: 1,
            data: coords.iter().map(|_| noisy(1.0)).collect(),
        };
        CaptureStack {
            phase,
            gray,
            complement,
            black,
            white,
        }
    }

    #[test]
    fn full_stack_recovers_projector_coordinate() {
        let params = PhaseParams::default();
        let extent = 456;
        let coords: Vec<f64> = (0..20_000)
            .map(|i| 0.001 + i as f64 * (extent as f64 - 0.002) / 20_000.0)
            .collect();
        let stack = stack_for_coords(&coords, &params, extent, 0.0, 0);
        let abs = stack.absolute_phase(&params, extent).unwrap();
        let up = abs.projector_coords(extent);
        for (i, (&c, u)) in coords.iter().zip(&up).enumerate() {
            let u = u.unwrap_or_else(|| panic!("pixel {i} invalid at coord {c}"));
            assert!((u - c).abs() < 1e-6, "coord {c}: {u}");
            let truth_phase = TAU * c / params.wavelength;
            assert!((abs.phase[i] - truth_phase).abs() < 1e-8);
        }
    }

    #[test]
    fn decoded_period_matches_ground_truth() {
        let params = PhaseParams::default();
        let extent = 456;
        let coords: Vec<f64> = (0..5000).map(|i| i as f64 * 0.0911).collect();
        let stack = stack_for_coords(&coords, &params, extent, 0.0, 0);
        let periods = period_count(extent, params.wavelength);
        let k = decode_fringe_order(
            &stack.gray,
            &stack.black,
            &stack.white,
            periods,
            params.contrast_floor,
        )
        .unwrap();
        for (i, &c) in coords.iter().enumerate() {
            assert_eq!(k.get(i), Some(period_index(c, params.wavelength)));
        }
    }

    #[test]
    fn noisy_stack_unwraps_without_period_jumps() {
        let params = PhaseParams::default();
        let extent = 456;
        let coords: Vec<f64> = (0..20_000).map(|i| 0.5 + i as f64 * 0.0226).collect();
        let stack = stack_for_coords(&coords, &params, extent, 0.01, 42);
        let abs = stack.absolute_phase(&params, extent).unwrap();
        let up = abs.projector_coords(extent);
        for (&c, u) in coords.iter().zip(&up) {
            let u = u.unwrap();
            assert!((u - c).abs() < 1.0, "coord {c}: {u}");
        }
    }

    #[test]
    fn unwrap_consistency_with_alignment() {
        let params = PhaseParams::default();
        let coords: Vec<f64> = (0..3000).map(|i| i as f64 * 0.137).collect();
        let stack = stack_for_coords(&coords, &params, 456, 0.005, 9);
        let wrapped = wrapped_phase_from_images(&stack.phase, 0.02).unwrap();
        let mut caps = stack.gray.clone();
        caps.push(stack.complement.clone());
        let half = decode_fringe_order(
            &caps,
            &stack.black,
            &stack.white,
            2 * period_count(456, 18.0),
            0.02,
        )
        .unwrap();
        let orders = align_fringe_order(&wrapped, &half).unwrap();
        let abs = unwrap_phase(&wrapped, &orders, 18.0).unwrap();
        for i in 0..coords.len() {
            if let (Some(p), Some(k)) = (abs.get(i), orders.get(i)) {
                let r = p - TAU * k as f64;
                assert!(r > -PI && r <= PI);
            }
        }
    }

    #[test]
    fn random_retrieval_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &n in &[3usize, 4, 5, 8, 12] {
            for _ in 0..1000 {
                let b: f64 = rng.random_range(0.05..0.5);
                let a: f64 = rng.random_range(b..(1.0 - b).max(b + 1e-9));
                let phi_star = rng.random_range(-PI..PI);
                let (phi, _) = retrieve_phase((0..n).map(|k| {
                    (
                        a + b * (phi_star - phase_shift(k, n)).cos(),
                        phase_shift(k, n),
                    )
                }));
                assert!(wrap_angle(phi - phi_star).abs() < 1e-10);
            }
        }
    }
}
