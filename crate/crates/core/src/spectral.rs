//! Galerkin representation of divergence-free velocity fields on the
//! 2-periodic torus `[0, 2π)²`.
//!
//! A field is stored as one complex amplitude per representative wavevector
//! `k` (one of each `±k` pair). Mode `k` contributes
//!
//! ```text
//! u_k(x) = √2 · Re(a_k e^{i k·x}) · k⊥/|k|,     k⊥ = (−k₂, k₁)
//! ```
//!
//! so every representable field is real, zero-mean and divergence-free, and
//! the normalised L² inner product of two fields is `Σ Re(a_k · conj(b_k))`.
//! Each representative carries two real Stokes eigenfunctions (the cosine
//! and sine parts), both with eigenvalue `λ_k = |k|²`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Integer wavevector `(k₁, k₂)`.
pub type Wavevector = [i32; 2];

/// Representative half-plane: `k₁ > 0`, or `k₁ = 0` and `k₂ > 0`.
fn is_representative(k: Wavevector) -> bool {
    k[0] > 0 || (k[0] == 0 && k[1] > 0)
}

/// One interacting triad `p + q = k` of the truncated advection term.
#[derive(Debug, Clone, Copy)]
struct Triad {
    /// Full-lattice indices; `i < M` is a representative, `i ≥ M` its negative.
    p: usize,
    q: usize,
    /// Representative receiving the contribution.
    k: usize,
    /// Coefficient of `i·c_p(u)·c_q(v)` in `B(u, v)_k`.
    advect: f64,
    /// Coefficient of `i·c_p(u)·c_q(w)` in the transpose-gradient term.
    transpose: f64,
}

/// The retained Stokes eigenbasis on the torus.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    cutoff: u32,
    modes: Vec<Wavevector>,
    eigenvalues: Vec<f64>,
    /// Unit vectors `k⊥/|k|`.
    directions: Vec<[f64; 2]>,
    index: HashMap<Wavevector, usize>,
    by_eigenvalue: Vec<usize>,
    triads: Vec<Triad>,
    /// `(p, q, k, advect)` for the triads with `advect ≠ 0`, in triad order.
    advecting: Vec<(u32, u32, u32, f64)>,
}

impl PartialEq for BasisSpec {
    fn eq(&self, other: &Self) -> bool {
        self.modes == other.modes
    }
}

impl BasisSpec {
    /// All representative modes with `0 < |k|_∞ ≤ cutoff`, sorted
    /// lexicographically.
    pub fn new(cutoff: i64) -> Result<Arc<Self>> {
        if cutoff < 1 {
            return invalid(format!("basis cutoff must be >= 1, got {cutoff}"));
        }
        let c = cutoff as i32;
        let mut modes = Vec::new();
        for k1 in -c..=c {
            for k2 in -c..=c {
                if is_representative([k1, k2]) {
                    modes.push([k1, k2]);
                }
            }
        }
        Self::from_modes(modes)
    }

    /// Basis on an explicit mode list. Modes are re-sorted lexicographically;
    /// each must be a nonzero representative, without duplicates.
    pub fn from_modes(mut modes: Vec<Wavevector>) -> Result<Arc<Self>> {
        if modes.is_empty() {
            return invalid("basis needs at least one mode");
        }
        for &k in &modes {
            if k == [0, 0] {
                return invalid("zero wavevector is not allowed");
            }
            if !is_representative(k) {
                return invalid(format!(
                    "mode ({}, {}) is not a representative; use ({}, {})",
                    k[0], k[1], -k[0], -k[1]
                ));
            }
        }
        modes.sort_unstable();
        if modes.windows(2).any(|w| w[0] == w[1]) {
            return invalid("duplicate mode in basis");
        }

        let eigenvalues: Vec<f64> = modes.iter().map(|k| f64::from(k[0] * k[0] + k[1] * k[1])).collect();
        let directions: Vec<[f64; 2]> = modes
            .iter()
            .zip(&eigenvalues)
            .map(|(k, lam)| {
                let n = lam.sqrt();
                [-f64::from(k[1]) / n, f64::from(k[0]) / n]
            })
            .collect();
        let index: HashMap<Wavevector, usize> = modes.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let mut by_eigenvalue: Vec<usize> = (0..modes.len()).collect();
        by_eigenvalue.sort_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b]));
        let cutoff = modes
            .iter()
            .map(|k| k[0].unsigned_abs().max(k[1].unsigned_abs()))
            .max()
            .unwrap_or(0);

        let mut basis = BasisSpec {
            cutoff,
            modes,
            eigenvalues,
            directions,
            index,
            by_eigenvalue,
            triads: Vec::new(),
            advecting: Vec::new(),
        };
        basis.triads = basis.build_triads();
        basis.advecting = basis
            .triads
            .iter()
            .filter(|t| t.advect != 0.0)
            .map(|t| (t.p as u32, t.q as u32, t.k as u32, t.advect))
            .collect();
        Ok(Arc::new(basis))
    }

    fn full_wavevector(&self, f: usize) -> [f64; 2] {
        let m = self.modes.len();
        let k = self.modes[f % m];
        let s = if f < m { 1.0 } else { -1.0 };
        [s * f64::from(k[0]), s * f64::from(k[1])]
    }

    fn build_triads(&self) -> Vec<Triad> {
        let m = self.modes.len();
        let frac = std::f64::consts::FRAC_1_SQRT_2;
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let mut triads = Vec::new();
        for p in 0..2 * m {
            let pv = self.full_wavevector(p);
            let dp = self.directions[p % m];
            for q in 0..2 * m {
                let qv = self.full_wavevector(q);
                let kv = [(pv[0] + qv[0]) as i32, (pv[1] + qv[1]) as i32];
                let Some(&k) = self.index.get(&kv) else {
                    continue;
                };
                let dq = self.directions[q % m];
                let dk = self.directions[k];
                let advect = frac * dot(dp, qv) * dot(dq, dk);
                let transpose = frac * dot(dk, pv) * dot(dp, dq);
                if advect != 0.0 || transpose != 0.0 {
                    triads.push(Triad {
                        p,
                        q,
                        k,
                        advect,
                        transpose,
                    });
                }
            }
        }
        triads
    }

    /// Largest `|k|_∞` among retained modes.
    pub fn cutoff(&self) -> u32 {
        self.cutoff
    }

    pub fn modes(&self) -> &[Wavevector] {
        &self.modes
    }

    /// `λ_k = |k|²`, in mode order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Position of a representative wavevector.
    pub fn index_of(&self, k: Wavevector) -> Option<usize> {
        self.index.get(&k).copied()
    }

    /// Smallest retained eigenvalue.
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[self.by_eigenvalue[0]]
    }

    /// Unit polarisation `k⊥/|k|` of mode `i`.
    pub fn direction(&self, i: usize) -> [f64; 2] {
        self.directions[i]
    }

    /// Mode indices ordered by eigenvalue, ties in mode order.
    pub fn eigen_order(&self) -> &[usize] {
        &self.by_eigenvalue
    }

    pub(crate) fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || self.modes == other.modes
    }
}

/// `u ∈ H` in the truncated basis.
#[derive(Debug, Clone)]
pub struct SpectralField {
    basis: Arc<BasisSpec>,
    amps: Vec<Complex64>,
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.basis.same_as(&other.basis) && self.amps == other.amps
    }
}

impl SpectralField {
    pub fn zeros(basis: &Arc<BasisSpec>) -> Self {
        SpectralField {
            basis: Arc::clone(basis),
            amps: vec![Complex64::new(0.0, 0.0); basis.len()],
        }
    }

    pub fn from_amps(basis: &Arc<BasisSpec>, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != basis.len() {
            return invalid(format!("expected {} amplitudes, got {}", basis.len(), amps.len()));
        }
        Ok(SpectralField {
            basis: Arc::clone(basis),
            amps,
        })
    }

    /// Unit amplitude on a single mode.
    pub fn unit(basis: &Arc<BasisSpec>, k: Wavevector) -> Result<Self> {
        let i = basis
            .index_of(k)
            .ok_or_else(|| Error::InvalidArgument(format!("mode {k:?} not in basis")))?;
        let mut u = Self::zeros(basis);
        u.amps[i] = Complex64::new(1.0, 0.0);
        Ok(u)
    }

    /// Field with independent standard normal real and imaginary parts,
    /// scaled by `scale`.
    pub fn random<R: rand::Rng + ?Sized>(basis: &Arc<BasisSpec>, scale: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let amps = (0..basis.len())
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(scale * re, scale * im)
            })
            .collect();
        SpectralField {
            basis: Arc::clone(basis),
            amps,
        }
    }

    pub fn basis(&self) -> &Arc<BasisSpec> {
        &self.basis
    }

    pub fn amps(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [Complex64] {
        &mut self.amps
    }

    pub fn into_amps(self) -> Vec<Complex64> {
        self.amps
    }

    pub(crate) fn check_same_basis(&self, other: &SpectralField) -> Result<()> {
        if self.basis.same_as(&other.basis) {
            Ok(())
        } else {
            invalid("fields live on different bases")
        }
    }

    /// Real inner product `(u, v)` in H.
    pub fn dot(&self, other: &SpectralField) -> f64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    /// H-norm `‖u‖`.
    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// V-norm `|u|_V = ‖∇u‖ = (Lu, u)^{1/2}`.
    pub fn v_norm(&self) -> f64 {
        self.amps
            .iter()
            .zip(self.basis.eigenvalues())
            .map(|(a, lam)| lam * a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// `‖u − v‖`; both fields must share a basis.
    pub fn distance(&self, other: &SpectralField) -> f64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, s: f64) -> SpectralField {
        SpectralField {
            basis: Arc::clone(&self.basis),
            amps: self.amps.iter().map(|a| a * s).collect(),
        }
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, other: &SpectralField, s: f64) -> SpectralField {
        SpectralField {
            basis: Arc::clone(&self.basis),
            amps: self.amps.iter().zip(&other.amps).map(|(a, b)| a + b * s).collect(),
        }
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        self.add_scaled(other, -1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.amps.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    /// Largest amplitude modulus.
    pub fn max_abs(&self) -> f64 {
        self.amps.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// Real coordinates `(re₀, im₀, re₁, im₁, …)`.
    pub fn to_real_vec(&self) -> Vec<f64> {
        self.amps.iter().flat_map(|a| [a.re, a.im]).collect()
    }

    pub fn from_real_vec(basis: &Arc<BasisSpec>, x: &[f64]) -> Result<Self> {
        if x.len() != 2 * basis.len() {
            return invalid(format!(
                "expected {} real coordinates, got {}",
                2 * basis.len(),
                x.len()
            ));
        }
        Ok(SpectralField {
            basis: Arc::clone(basis),
            amps: x.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect(),
        })
    }

    /// Write as CSV records `k1,k2,re,im` in basis order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(["k1", "k2", "re", "im"])?;
        for (k, a) in self.basis.modes().iter().zip(&self.amps) {
            wtr.serialize(ModeRecord {
                k1: k[0],
                k2: k[1],
                re: a.re,
                im: a.im,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read the CSV written by [`SpectralField::write_csv`]. With a basis
    /// given, every record must name one of its modes; otherwise the basis
    /// is rebuilt from the listed modes.
    pub fn read_csv<R: Read>(r: R, basis: Option<&Arc<BasisSpec>>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let records: Vec<ModeRecord> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let basis = match basis {
            Some(b) => Arc::clone(b),
            None => BasisSpec::from_modes(records.iter().map(|r| [r.k1, r.k2]).collect())?,
        };
        let mut u = SpectralField::zeros(&basis);
        let mut seen = vec![false; basis.len()];
        for r in records {
            let i = basis
                .index_of([r.k1, r.k2])
                .ok_or_else(|| Error::Parse(format!("mode ({}, {}) not in basis", r.k1, r.k2)))?;
            if seen[i] {
                return Err(Error::Parse(format!("mode ({}, {}) listed twice", r.k1, r.k2)));
            }
            seen[i] = true;
            u.amps[i] = Complex64::new(r.re, r.im);
        }
        Ok(u)
    }
}

#[derive(Serialize, Deserialize)]
struct ModeRecord {
    k1: i32,
    k2: i32,
    re: f64,
    im: f64,
}

/// Noise coefficients `b_k` on the retained modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    b: Vec<f64>,
    pub decay_exponent: f64,
    pub b0: f64,
}

impl NoiseSpec {
    /// `b_k = b0 · |k|^{−s}`.
    pub fn power_law(basis: &BasisSpec, b0: f64, decay_exponent: f64) -> Result<Self> {
        if !(b0 > 0.0 && b0.is_finite()) {
            return invalid(format!("noise amplitude b0 must be positive, got {b0}"));
        }
        if !decay_exponent.is_finite() {
            return invalid("noise decay exponent must be finite");
        }
        let b = basis
            .eigenvalues()
            .iter()
            .map(|lam| b0 * lam.sqrt().powf(-decay_exponent))
            .collect();
        Ok(NoiseSpec { b, decay_exponent, b0 })
    }

    /// Explicit weights, one per mode.
    pub fn from_weights(basis: &BasisSpec, b: Vec<f64>) -> Result<Self> {
        if b.len() != basis.len() {
            return invalid(format!("expected {} noise weights, got {}", basis.len(), b.len()));
        }
        if let Some(x) = b.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return invalid(format!("noise weights must be positive, got {x}"));
        }
        Ok(NoiseSpec {
            b0: b[0],
            decay_exponent: f64::NAN,
            b,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    /// `𝔅₁ = Σ λ_m b_m²` over the real eigenfunctions (two per mode).
    pub fn frak_b1(&self, basis: &BasisSpec) -> f64 {
        2.0 * basis
            .eigenvalues()
            .iter()
            .zip(&self.b)
            .map(|(lam, b)| lam * b * b)
            .sum::<f64>()
    }

    /// `max_k √λ_k · b_k`, the embedding constant of `H_θ` into `V`.
    pub fn embedding_constant(&self, basis: &BasisSpec) -> f64 {
        basis
            .eigenvalues()
            .iter()
            .zip(&self.b)
            .map(|(lam, b)| lam.sqrt() * b)
            .fold(0.0, f64::max)
    }
}

/// `(‖u‖, |u|_V, |u|_{H_θ})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub h: f64,
    pub v: f64,
    pub htheta: f64,
}

pub fn norms(u: &SpectralField, noise: &NoiseSpec) -> Norms {
    Norms {
        h: u.norm(),
        v: u.v_norm(),
        htheta: htheta_norm(u, noise),
    }
}

pub fn htheta_norm(u: &SpectralField, noise: &NoiseSpec) -> f64 {
    htheta_norm_sq(u, noise).sqrt()
}

pub(crate) fn htheta_norm_sq(u: &SpectralField, noise: &NoiseSpec) -> f64 {
    u.amps
        .iter()
        .zip(noise.weights())
        .map(|(a, b)| a.norm_sqr() / (b * b))
        .sum()
}

/// Stokes operator: multiply mode `k` by `λ_k`.
pub fn stokes_apply(u: &SpectralField) -> SpectralField {
    SpectralField {
        basis: Arc::clone(&u.basis),
        amps: u
            .amps
            .iter()
            .zip(u.basis.eigenvalues())
            .map(|(a, lam)| a * lam)
            .collect(),
    }
}

#[inline]
fn lift(amps: &[Complex64], f: usize) -> Complex64 {
    let m = amps.len();
    if f < m {
        amps[f]
    } else {
        amps[f - m].conj()
    }
}

/// `B(u, v) = Π(u·∇)v`, truncated to the basis, by direct summation over
/// interacting triads.
pub fn bilinear(u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
    u.check_same_basis(v)?;
    Ok(bilinear_unchecked(u, v))
}

/// Amplitudes on the full lattice: representatives, then their conjugates.
fn lifted(amps: &[Complex64]) -> Vec<Complex64> {
    amps.iter().copied().chain(amps.iter().map(|a| a.conj())).collect()
}

pub(crate) fn bilinear_unchecked(u: &SpectralField, v: &SpectralField) -> SpectralField {
    let mut out = vec![Complex64::new(0.0, 0.0); u.basis.len()];
    let (lu, lv) = (lifted(&u.amps), lifted(&v.amps));
    for &(p, q, k, g) in &u.basis.advecting {
        let prod = lu[p as usize] * lv[q as usize];
        // i·g·prod
        out[k as usize] += Complex64::new(-prod.im, prod.re) * g;
    }
    SpectralField {
        basis: Arc::clone(&u.basis),
        amps: out,
    }
}

/// Transpose of the linearisation of `u ↦ B(u, u)` at `u`, applied to `w`:
/// the field `g` with `(B(δ,u) + B(u,δ), w) = (g, δ)` for every `δ`.
pub fn bilinear_jacobian_transpose(u: &SpectralField, w: &SpectralField) -> Result<SpectralField> {
    u.check_same_basis(w)?;
    Ok(bilinear_jacobian_transpose_unchecked(u, w))
}

pub(crate) fn bilinear_jacobian_transpose_unchecked(u: &SpectralField, w: &SpectralField) -> SpectralField {
    // Π[(∇u)ᵀ w] − B(u, w)
    let mut out = vec![Complex64::new(0.0, 0.0); u.basis.len()];
    for t in &u.basis.triads {
        let up = lift(&u.amps, t.p);
        if t.transpose != 0.0 {
            let prod = up * lift(&w.amps, t.q);
            out[t.k] += Complex64::new(-prod.im, prod.re) * t.transpose;
        }
        if t.advect != 0.0 {
            let prod = up * lift(&w.amps, t.q);
            out[t.k] -= Complex64::new(-prod.im, prod.re) * t.advect;
        }
    }
    SpectralField {
        basis: Arc::clone(&u.basis),
        amps: out,
    }
}

/// Orthogonal projection onto the `n` modes of smallest eigenvalue.
pub fn project_low(u: &SpectralField, n: usize) -> SpectralField {
    let mut out = SpectralField::zeros(&u.basis);
    for &i in u.basis.eigen_order().iter().take(n) {
        out.amps[i] = u.amps[i];
    }
    out
}
