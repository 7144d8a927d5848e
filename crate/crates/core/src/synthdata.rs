//! Procedural "head" phantoms with optional planted anomalies.
//!
//! A phantom is a rotated elliptical skull with a bright rim, a midline
//! echo and two symmetric dark inner structures, all with soft one-pixel
//! edges, under multiplicative speckle. Each phantom is a pure function of
//! its seed. Geometry, speckle and anomaly placement use separate random
//! streams, so a normal phantom and an anomalous variant built from the
//! same seed share identical geometry and speckle.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io;
use crate::rng::{derive_seed, rng, Rng};

const GEOMETRY_STREAM: u64 = 0;
const SPECKLE_STREAM: u64 = 1;
const ANOMALY_STREAM: u64 = 2;
const SEVERITY_STREAM: u64 = 3;

/// Extra pixels around analytic anomaly bounds covering soft edges.
const REGION_MARGIN: f64 = 3.0;

/// Closed interval `[lo, hi]`, written as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn check(&self, name: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && lo <= self.0 && self.0 <= self.1 && self.1 <= hi) {
            return Err(Error::Config(format!(
                "{name} must satisfy {lo} <= lo <= hi <= {hi}, got [{}, {}]",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

/// Shape and intensity distribution of normal phantoms. Lengths are
/// fractions: skull axes of the image side, inner structures of the skull
/// axes. Intensities are on `[0, 1]` before mapping to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub side: usize,
    /// Horizontal skull semi-axis.
    pub skull_a: Interval,
    /// Vertical skull semi-axis.
    pub skull_b: Interval,
    pub center_jitter: f64,
    /// Maximum absolute rotation in radians.
    pub max_rotation: f64,
    pub rim_thickness: Interval,
    pub midline_width: Interval,
    pub ventricle_width: Interval,
    pub ventricle_length: Interval,
    pub ventricle_offset: Interval,
    pub speckle: f64,
    pub background: Interval,
    pub tissue: Interval,
    pub rim: Interval,
    pub ventricle: Interval,
    pub midline: Interval,
    /// Cyst peak brightness at severity 1.
    pub cyst_amplitude: f64,
    /// Cyst Gaussian width as a fraction of the side.
    pub cyst_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            side: 64,
            skull_a: Interval(0.30, 0.38),
            skull_b: Interval(0.36, 0.44),
            center_jitter: 0.03,
            max_rotation: 0.3,
            rim_thickness: Interval(0.07, 0.10),
            midline_width: Interval(0.02, 0.035),
            ventricle_width: Interval(0.12, 0.18),
            ventricle_length: Interval(0.28, 0.36),
            ventricle_offset: Interval(0.22, 0.30),
            speckle: 0.15,
            background: Interval(0.02, 0.06),
            tissue: Interval(0.35, 0.45),
            rim: Interval(0.8, 0.95),
            ventricle: Interval(0.08, 0.15),
            midline: Interval(0.7, 0.85),
            cyst_amplitude: 0.6,
            cyst_sigma: 0.06,
        }
    }
}

impl PhantomParams {
    pub fn with_side(side: usize) -> Self {
        Self {
            side,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config(format!("phantom side must be at least 8, got {}", self.side)));
        }
        self.skull_a.check("skull_a", 0.05, 0.5)?;
        self.skull_b.check("skull_b", 0.05, 0.5)?;
        if !(0.0..0.1).contains(&self.center_jitter) {
            return Err(Error::Config("center_jitter must be in [0, 0.1)".into()));
        }
        if self.skull_a.hi().max(self.skull_b.hi()) + self.center_jitter > 0.5 {
            return Err(Error::Config("skull does not fit inside the image".into()));
        }
        if !(0.0..=PI).contains(&self.max_rotation) {
            return Err(Error::Config("max_rotation must be in [0, pi]".into()));
        }
        self.rim_thickness.check("rim_thickness", 0.0, 0.5)?;
        self.midline_width.check("midline_width", 0.0, 0.2)?;
        self.ventricle_width.check("ventricle_width", 0.0, 0.3)?;
        self.ventricle_length.check("ventricle_length", 0.0, 0.5)?;
        self.ventricle_offset.check("ventricle_offset", 0.0, 0.5)?;
        for (name, i) in [
            ("background", self.background),
            ("tissue", self.tissue),
            ("rim", self.rim),
            ("ventricle", self.ventricle),
            ("midline", self.midline),
        ] {
            i.check(name, 0.0, 1.0)?;
        }
        if !(self.speckle >= 0.0 && self.cyst_amplitude >= 0.0 && self.cyst_sigma > 0.0) {
            return Err(Error::Config("speckle, cyst_amplitude and cyst_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    CystBlob,
    EnlargedVentricle,
    MissingMidline,
    ShrunkenHead,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::CystBlob,
        AnomalyKind::EnlargedVentricle,
        AnomalyKind::MissingMidline,
        AnomalyKind::ShrunkenHead,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AnomalyKind::CystBlob => "cyst_blob",
            AnomalyKind::EnlargedVentricle => "enlarged_ventricle",
            AnomalyKind::MissingMidline => "missing_midline",
            AnomalyKind::ShrunkenHead => "shrunken_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_localized(&self) -> bool {
        !matches!(self, AnomalyKind::ShrunkenHead)
    }
}

/// A planted anomaly. `location` (row, column in pixels) is used by
/// `cyst_blob` only; when absent it is drawn inside the brain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub severity: f64,
    pub location: Option<(f64, f64)>,
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, severity: f64) -> Self {
        Self {
            kind,
            severity,
            location: None,
        }
    }

    pub fn at(mut self, row: f64, col: f64) -> Self {
        self.location = Some((row, col));
        self
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so the severity -> 0 limit can be rendered.
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::invalid(format!("severity must be in (0, 1], got {}", self.severity)));
        }
        if self.kind == AnomalyKind::ShrunkenHead && self.severity >= 0.9 {
            return Err(Error::invalid("shrunken_head severity must be below 0.9"));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyRegion {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl AnomalyRegion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    /// Centre in pixel-index coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.top + self.bottom) as f64 / 2.0 - 0.5,
            (self.left + self.right) as f64 / 2.0 - 0.5,
        )
    }

    fn from_extent(cy: f64, cx: f64, half_h: f64, half_w: f64, side: usize) -> Self {
        // Pixel (r, c) has its centre at (r + 0.5, c + 0.5).
        let lo = |v: f64| (v - 0.5).floor().max(0.0) as usize;
        let hi = |v: f64| ((v - 0.5).ceil() as isize + 1).clamp(0, side as isize) as usize;
        Self {
            top: lo(cy - half_h),
            left: lo(cx - half_w),
            bottom: hi(cy + half_h),
            right: hi(cx + half_w),
        }
    }
}

/// Sampled geometry and intensities of one phantom, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    rim: f64,
    midline_width: f64,
    vent_a: f64,
    vent_b: f64,
    vent_offset: f64,
    vent_shift: f64,
    background: f64,
    tissue: f64,
    rim_value: f64,
    vent_value: f64,
    midline_value: f64,
}

impl Geometry {
    fn sample(seed: u64, p: &PhantomParams) -> Self {
        let mut r = rng(derive_seed(seed, &[GEOMETRY_STREAM]));
        let n = p.side as f64;
        let j = p.center_jitter * n;
        let jitter = |r: &mut Rng| if j > 0.0 { r.random_range(-j..=j) } else { 0.0 };
        let cy = n / 2.0 + jitter(&mut r);
        let cx = n / 2.0 + jitter(&mut r);
        let a = p.skull_a.sample(&mut r) * n;
        let b = p.skull_b.sample(&mut r) * n;
        let angle = if p.max_rotation > 0.0 {
            r.random_range(-p.max_rotation..=p.max_rotation)
        } else {
            0.0
        };
        let rim = p.rim_thickness.sample(&mut r);
        let midline_width = p.midline_width.sample(&mut r) * n;
        let vent_a = p.ventricle_width.sample(&mut r) * a;
        let vent_b = p.ventricle_length.sample(&mut r) * b;
        let vent_offset = p.ventricle_offset.sample(&mut r) * a;
        let vent_shift = r.random_range(-0.1..=0.1) * b;
        Self {
            cy,
            cx,
            a,
            b,
            angle,
            rim,
            midline_width,
            vent_a,
            vent_b,
            vent_offset,
            vent_shift,
            background: p.background.sample(&mut r),
            tissue: p.tissue.sample(&mut r),
            rim_value: p.rim.sample(&mut r),
            vent_value: p.ventricle.sample(&mut r),
            midline_value: p.midline.sample(&mut r),
        }
    }

    /// Image offsets `(dy, dx)` to skull-aligned `(u, v)`: `u` along the
    /// horizontal axis `a`, `v` along the vertical axis `b`.
    fn to_local(&self, dy: f64, dx: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (u * s + v * c, u * c - v * s)
    }

    /// Half extents `(rows, cols)` of an axis-aligned box around a local
    /// ellipse with semi-axes `(au, bv)`.
    fn ellipse_extent(&self, au: f64, bv: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (((au * s).powi(2) + (bv * c).powi(2)).sqrt(), ((au * c).powi(2) + (bv * s).powi(2)).sqrt())
    }

    /// Half extents `(rows, cols)` of an axis-aligned box around the local
    /// rectangle `|u| <= hu, |v| <= hv`.
    fn rect_extent(&self, hu: f64, hv: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (hu * s.abs() + hv * c.abs(), hu * c.abs() + hv * s.abs())
    }

    fn inner_axes(&self) -> (f64, f64) {
        (self.a * (1.0 - self.rim), self.b * (1.0 - self.rim))
    }

    fn midline_half_length(&self) -> f64 {
        0.8 * self.inner_axes().1
    }

    /// All lengths multiplied by `k` about the centre.
    fn scaled(&self, k: f64) -> Self {
        Self {
            a: self.a * k,
            b: self.b * k,
            vent_a: self.vent_a * k,
            vent_b: self.vent_b * k,
            vent_offset: self.vent_offset * k,
            vent_shift: self.vent_shift * k,
            ..*self
        }
    }
}

/// Fraction of a pixel covered by the ellipse `(u/a)^2 + (v/b)^2 <= 1`,
/// as a one-pixel linear ramp on an estimate of the signed distance.
fn ellipse_cover(u: f64, v: f64, a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let f = (u / a).powi(2) + (v / b).powi(2) - 1.0;
    let grad = 2.0 * ((u / (a * a)).powi(2) + (v / (b * b)).powi(2)).sqrt();
    if f <= 0.0 && grad < 1e-12 {
        return 1.0;
    }
    let d = f / grad.max(1e-12);
    (0.5 - d).clamp(0.0, 1.0)
}

struct Layers {
    value: f64,
    head: f64,
}

fn render_pixel(g: &Geometry, spec: Option<&ResolvedAnomaly>, r: usize, c: usize) -> Layers {
    let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
    let geo = match spec {
        Some(ResolvedAnomaly::Shrunken { scale }) => g.scaled(*scale),
        _ => *g,
    };
    let (u, v) = geo.to_local(py - geo.cy, px - geo.cx);
    let head = ellipse_cover(u, v, geo.a, geo.b);
    let (ia, ib) = geo.inner_axes();
    let inner = ellipse_cover(u, v, ia, ib).min(head);
    let rho2 = (u / ia).powi(2) + (v / ib).powi(2);
    let tissue = geo.tissue * (1.0 - 0.15 * rho2.min(1.0));
    let mut value = geo.background * (1.0 - head) + geo.rim_value * (head - inner) + tissue * inner;

    let (mut va, mut vb) = (geo.vent_a, geo.vent_b);
    if let Some(ResolvedAnomaly::Ventricle { width, length }) = spec {
        va *= width;
        vb *= length;
    }
    let vent = ellipse_cover(u - geo.vent_offset, v - geo.vent_shift, va, vb)
        .max(ellipse_cover(u + geo.vent_offset, v - geo.vent_shift, va, vb))
        .min(inner);
    value = value * (1.0 - vent) + geo.vent_value * vent;

    let half_len = geo.midline_half_length();
    let across = (0.5 * geo.midline_width + 0.5 - u.abs()).clamp(0.0, 1.0);
    let along = (half_len + 0.5 - v.abs()).clamp(0.0, 1.0);
    let mut line = (across * along).min(inner);
    if let Some(ResolvedAnomaly::Midline { keep }) = spec {
        line *= keep;
    }
    value = value * (1.0 - line) + geo.midline_value * line;

    if let Some(ResolvedAnomaly::Cyst {
        row,
        col,
        amplitude,
        sigma,
    }) = spec
    {
        let d2 = (py - (row + 0.5)).powi(2) + (px - (col + 0.5)).powi(2);
        let cut = (-4.5f64).exp();
        let bump = ((-d2 / (2.0 * sigma * sigma)).exp() - cut).max(0.0) / (1.0 - cut);
        value += amplitude * bump;
    }
    Layers {
        value: value.clamp(0.0, 1.0),
        head,
    }
}

/// Anomaly with location and magnitudes resolved to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ResolvedAnomaly {
    Cyst {
        row: f64,
        col: f64,
        amplitude: f64,
        sigma: f64,
    },
    Ventricle {
        width: f64,
        length: f64,
    },
    Midline {
        keep: f64,
    },
    Shrunken {
        scale: f64,
    },
}

/// Whether pixel-index point `(row, col)` lies strictly inside the brain
/// (the skull's inner ellipse) at normalized radius below `limit`.
fn inside_brain(g: &Geometry, row: f64, col: f64, limit: f64) -> bool {
    let (u, v) = g.to_local(row + 0.5 - g.cy, col + 0.5 - g.cx);
    let (ia, ib) = g.inner_axes();
    (u / ia).powi(2) + (v / ib).powi(2) < limit * limit
}

fn resolve(
    seed: u64,
    g: &Geometry,
    p: &PhantomParams,
    spec: &AnomalySpec,
) -> Result<(ResolvedAnomaly, AnomalyRegion)> {
    spec.validate()?;
    let n = p.side;
    let sev = spec.severity;
    Ok(match spec.kind {
        AnomalyKind::CystBlob => {
            let (row, col) = match spec.location {
                Some((row, col)) => {
                    if !inside_brain(g, row, col, 1.0) {
                        return Err(Error::invalid(format!(
                            "cyst location ({row}, {col}) lies outside the brain"
                        )));
                    }
                    (row, col)
                }
                None => {
                    let mut r = rng(derive_seed(seed, &[ANOMALY_STREAM]));
                    let (ia, ib) = g.inner_axes();
                    loop {
                        let u = r.random_range(-ia..=ia) * 0.6;
                        let v = r.random_range(-ib..=ib) * 0.6;
                        let (dy, dx) = g.to_image(u, v);
                        let (row, col) = ((g.cy + dy - 0.5).round(), (g.cx + dx - 0.5).round());
                        if inside_brain(g, row, col, 0.65) {
                            break (row, col);
                        }
                    }
                }
            };
            let sigma = p.cyst_sigma * n as f64;
            let reach = 3.0 * sigma + 1.0;
            (
                ResolvedAnomaly::Cyst {
                    row,
                    col,
                    amplitude: p.cyst_amplitude * sev,
                    sigma,
                },
                AnomalyRegion::from_extent(row + 0.5, col + 0.5, reach, reach, n),
            )
        }
        AnomalyKind::EnlargedVentricle => {
            let (width, length) = (1.0 + sev, 1.0 + 0.5 * sev);
            let (va, vb) = (g.vent_a * width, g.vent_b * length);
            // Box around both (enlarged) ventricles.
            let (eh, ew) = g.rect_extent(va + g.vent_offset, vb + g.vent_shift.abs());
            (
                ResolvedAnomaly::Ventricle { width, length },
                AnomalyRegion::from_extent(g.cy, g.cx, eh + REGION_MARGIN, ew + REGION_MARGIN, n),
            )
        }
        AnomalyKind::MissingMidline => {
            let (eh, ew) = g.rect_extent(0.5 * g.midline_width + 0.5, g.midline_half_length() + 0.5);
            (
                ResolvedAnomaly::Midline { keep: 1.0 - sev },
                AnomalyRegion::from_extent(g.cy, g.cx, eh + REGION_MARGIN, ew + REGION_MARGIN, n),
            )
        }
        AnomalyKind::ShrunkenHead => {
            let (eh, ew) = g.ellipse_extent(g.a, g.b);
            (
                ResolvedAnomaly::Shrunken { scale: 1.0 - sev },
                AnomalyRegion::from_extent(g.cy, g.cx, eh + REGION_MARGIN, ew + REGION_MARGIN, n),
            )
        }
    })
}

/// A rendered phantom. `region` is set for anomalous phantoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub mask: Mask,
    pub region: Option<AnomalyRegion>,
}

fn render(seed: u64, params: &PhantomParams, spec: Option<&AnomalySpec>, speckle: bool) -> Result<Phantom> {
    params.validate()?;
    let g = Geometry::sample(seed, params);
    let resolved = spec.map(|s| resolve(seed, &g, params, s)).transpose()?;
    let n = params.side;
    let mut values = Vec::with_capacity(n * n);
    let mut kept = Vec::with_capacity(n * n);
    let mut speckle_rng = rng(derive_seed(seed, &[SPECKLE_STREAM]));
    for r in 0..n {
        for c in 0..n {
            let px = render_pixel(&g, resolved.as_ref().map(|(a, _)| a), r, c);
            // Drawn for every pixel so the stream stays aligned.
            let u: f64 = speckle_rng.random_range(-1.0..=1.0);
            let v = if speckle {
                (px.value * (1.0 + params.speckle * u)).clamp(0.0, 1.0)
            } else {
                px.value
            };
            values.push(2.0 * v - 1.0);
            kept.push(px.head < 0.5);
        }
    }
    Ok(Phantom {
        image: Image::new(n, n, values)?,
        mask: Mask::from_bools(n, n, kept)?,
        region: resolved.map(|(_, region)| region),
    })
}

/// Normal phantom and its mask (`m = 1` outside the skull).
pub fn generate_normal(seed: u64, params: &PhantomParams) -> Result<(Image, Mask)> {
    let p = render(seed, params, None, true)?;
    Ok((p.image, p.mask))
}

/// The normal phantom for `seed` with `spec` planted, its mask, and the
/// box containing every pixel the anomaly can change.
pub fn generate_anomalous(
    seed: u64,
    params: &PhantomParams,
    spec: &AnomalySpec,
) -> Result<(Image, Mask, AnomalyRegion)> {
    let p = render(seed, params, Some(spec), true)?;
    Ok((p.image, p.mask, p.region.expect("anomaly region")))
}

/// Phantom without speckle.
pub fn render_clean(seed: u64, params: &PhantomParams, spec: Option<&AnomalySpec>) -> Result<Phantom> {
    render(seed, params, spec, false)
}

/// Severity ranges used when building datasets, per anomaly kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityRanges {
    pub cyst_blob: Interval,
    pub enlarged_ventricle: Interval,
    pub missing_midline: Interval,
    pub shrunken_head: Interval,
}

impl Default for SeverityRanges {
    fn default() -> Self {
        Self {
            cyst_blob: Interval(0.6, 1.0),
            enlarged_ventricle: Interval(0.6, 1.0),
            missing_midline: Interval(0.8, 1.0),
            shrunken_head: Interval(0.2, 0.35),
        }
    }
}

impl SeverityRanges {
    pub fn get(&self, kind: AnomalyKind) -> Interval {
        match kind {
            AnomalyKind::CystBlob => self.cyst_blob,
            AnomalyKind::EnlargedVentricle => self.enlarged_ventricle,
            AnomalyKind::MissingMidline => self.missing_midline,
            AnomalyKind::ShrunkenHead => self.shrunken_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in AnomalyKind::ALL {
            self.get(kind).check(kind.name(), 0.0, 1.0)?;
            if self.get(kind).hi() <= 0.0 {
                return Err(Error::Config(format!("{} severity must be positive", kind.name())));
            }
        }
        if self.shrunken_head.hi() >= 0.9 {
            return Err(Error::Config("shrunken_head severity must be below 0.9".into()));
        }
        Ok(())
    }

    /// Severity for the anomalous phantom with `seed`.
    pub fn sample(&self, kind: AnomalyKind, seed: u64) -> f64 {
        self.get(kind).sample(&mut rng(derive_seed(seed, &[SEVERITY_STREAM])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub val_id: usize,
    pub test_id: usize,
    pub val_ood: usize,
    pub test_ood: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 2000,
            val_id: 100,
            test_id: 100,
            val_ood: 100,
            test_ood: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest row. `label` is 0 for normal and 1 for anomalous;
/// `group` is `normal` or the anomaly kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: String,
    pub label: u8,
    pub group: String,
    pub seed: u64,
    pub split: Split,
    pub mask_path: String,
    pub severity: f64,
}

impl ManifestEntry {
    pub fn is_anomalous(&self) -> bool {
        self.label == 1
    }

    pub fn kind(&self) -> Option<AnomalyKind> {
        AnomalyKind::from_name(&self.group)
    }

    pub fn spec(&self) -> Option<AnomalySpec> {
        self.kind().map(|k| AnomalySpec::new(k, self.severity))
    }

    /// Regenerates the phantom described by this row.
    pub fn render(&self, params: &PhantomParams) -> Result<Phantom> {
        render(self.seed, params, self.spec().as_ref(), true)
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub counts: SplitCounts,
    pub phantom: PhantomParams,
    pub severity: SeverityRanges,
}


impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.severity.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Train, validation and test rows. Every row gets a distinct seed derived
/// from the master seed and its position; anomalous rows cycle through the
/// anomaly kinds so each split is balanced.
pub fn build_splits(seed: u64, counts: &SplitCounts, severity: &SeverityRanges) -> Result<Manifest> {
    severity.validate()?;
    let mut entries = Vec::new();
    let mut next = 0u64;
    let mut push = |split: Split, kind: Option<AnomalyKind>, index: usize| {
        let s = derive_seed(seed, &[next]);
        next += 1;
        let tag = if kind.is_some() { "ood" } else { "id" };
        let image_id = format!("{}_{}_{:05}", split.name(), tag, index);
        entries.push(ManifestEntry {
            path: format!("images/{image_id}.png"),
            mask_path: format!("masks/{image_id}.png"),
            label: kind.is_some() as u8,
            group: kind.map_or("normal", |k| k.name()).to_string(),
            seed: s,
            split,
            severity: kind.map_or(0.0, |k| severity.sample(k, s)),
            image_id,
        });
    };
    for i in 0..counts.train {
        push(Split::Train, None, i);
    }
    for (split, id_count, ood_count) in [
        (Split::Val, counts.val_id, counts.val_ood),
        (Split::Test, counts.test_id, counts.test_ood),
    ] {
        for i in 0..id_count {
            push(split, None, i);
        }
        for i in 0..ood_count {
            push(split, Some(AnomalyKind::ALL[i % AnomalyKind::ALL.len()]), i);
        }
    }
    Ok(Manifest { entries })
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Writes the CSV; `header` lines are prefixed with `# `.
    pub fn write(&self, path: &Path, header: &str) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for line in header.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a manifest, skipping `#` comment lines.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
        let entries = r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { entries })
    }

    /// Path of a row-relative file resolved against the manifest's directory.
    pub fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(relative)
    }
}

/// Renders every row of a freshly built manifest into `out_dir` as PNG
/// images and masks, plus the manifest with the config echoed as comments.
pub fn write_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let manifest = build_splits(config.seed, &config.counts, &config.severity)?;
    for e in &manifest.entries {
        let p = e.render(&config.phantom)?;
        io::write_image(&out_dir.join(&e.path), &p.image)?;
        io::write_mask(&out_dir.join(&e.mask_path), &p.mask)?;
    }
    let header = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    manifest.write(&out_dir.join(MANIFEST_FILE), &header)?;
    Ok(manifest)
}
