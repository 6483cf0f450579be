//! Parametric toy generator for labeled jet events.
//!
//! Background tracks emanate from the origin with Gaussian-smeared impact
//! points; signal events route a few tracks through a secondary vertex
//! displaced along the jet axis by an exponential flight length, which makes
//! their closest-approach vectors systematically larger. The construction is
//! axially symmetric about the jet axis by design, and every event is drawn
//! from its own counter-based RNG substream so generation is reproducible
//! and order-independent.

use crate::geometry::{rotation_from_axis_angle, Rotation, Vec3};
use crate::math;
use alloc::vec::Vec;
use core::fmt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};

/// Hard cap on tracks per event.
pub const MAX_TRACKS: usize = 30;

/// Particle-class codes stored in [`Track::ptype`].
pub const PTYPE_HADRON: u8 = 0;
pub const PTYPE_ELECTRON: u8 = 1;
pub const PTYPE_MUON: u8 = 2;
/// Number of particle classes.
pub const N_PTYPES: usize = 3;

/// Probability that a generated hadron is neutral (toy value; electrons and
/// muons are always charged).
const NEUTRAL_HADRON_PROB: f64 = 0.25;

/// Invalid generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenError {
    pub what: &'static str,
}

impl fmt::Display for GenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid generator config: {}", self.what)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GenError {}

/// One reconstructed track: momentum, point of closest approach to the
/// origin, charge, and coarse particle class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track {
    /// Momentum (GeV).
    pub p: Vec3,
    /// Point of closest approach to the origin (mm); orthogonal to `p`.
    pub a: Vec3,
    /// Charge in {-1, 0, +1}.
    pub q: i8,
    /// Particle class code (`PTYPE_*`).
    pub ptype: u8,
}

/// One labeled jet: aggregate momentum plus its tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct JetEvent {
    /// Jet 3-momentum (GeV); never zero.
    pub jet_p: Vec3,
    /// 1 = signal (displaced vertex), 0 = background.
    pub label: u8,
    pub tracks: Vec<Track>,
}

impl JetEvent {
    /// Unit vector along the jet momentum.
    pub fn axis(&self) -> Vec3 {
        self.jet_p.normalized().expect("jet momentum is nonzero")
    }

    /// The same event with every momentum and impact point rotated.
    pub fn rotated(&self, r: &Rotation) -> JetEvent {
        JetEvent {
            jet_p: r.apply_to_vector(self.jet_p),
            label: self.label,
            tracks: self
                .tracks
                .iter()
                .map(|t| Track {
                    p: r.apply_to_vector(t.p),
                    a: r.apply_to_vector(t.a),
                    q: t.q,
                    ptype: t.ptype,
                })
                .collect(),
        }
    }
}

/// Generator configuration; `default()` gives the shipped toy settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Fraction of events labeled signal.
    pub signal_fraction: f64,
    /// Mean track count (Poisson, truncated to `[1, MAX_TRACKS]`).
    pub mean_tracks: f64,
    /// Mean number of tracks routed through the displaced vertex in signal
    /// events (Poisson, truncated to `[1, n_tracks]`).
    pub displaced_mean: f64,
    /// Jet transverse-momentum range (GeV).
    pub pt_min: f64,
    pub pt_max: f64,
    /// Jet pseudorapidity drawn uniformly in `[-eta_max, eta_max]`.
    pub eta_max: f64,
    /// Scale of the exponential vertex flight length along the axis (mm).
    pub flight_scale_mm: f64,
    /// Gaussian impact-point smearing width per coordinate (mm).
    pub smear_mm: f64,
    /// Probability that a prompt track (either class) picks up a spurious
    /// large impact kick — strange decays, conversions, pileup. Fakes make
    /// impact magnitude alone ambiguous: what still separates signal is
    /// that genuinely displaced tracks share one vertex, so their impact
    /// vectors are directionally coherent while fake impacts point
    /// anywhere.
    pub fake_rate: f64,
    /// Exponential magnitude scale of the spurious impact kick (mm).
    pub fake_scale_mm: f64,
    /// Angular collimation of tracks around the jet axis (radians-like).
    pub dir_sigma: f64,
    /// Class probabilities for hadron / electron / muon.
    pub type_probs: [f64; 3],
    /// Base RNG seed; each event uses substream `(seed, index)`.
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            signal_fraction: 0.5,
            mean_tracks: 12.0,
            displaced_mean: 4.0,
            pt_min: 90.0,
            pt_max: 500.0,
            eta_max: 2.0,
            flight_scale_mm: 6.0,
            smear_mm: 0.05,
            fake_rate: 0.3,
            fake_scale_mm: 2.0,
            dir_sigma: 0.3,
            type_probs: [0.85, 0.08, 0.07],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let finite = self.signal_fraction.is_finite()
            && self.mean_tracks.is_finite()
            && self.displaced_mean.is_finite()
            && self.pt_min.is_finite()
            && self.pt_max.is_finite()
            && self.eta_max.is_finite()
            && self.flight_scale_mm.is_finite()
            && self.smear_mm.is_finite()
            && self.dir_sigma.is_finite()
            && self.type_probs.iter().all(|p| p.is_finite());
        if !finite {
            return Err(GenError { what: "non-finite field" });
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return Err(GenError { what: "signal_fraction outside [0, 1]" });
        }
        if self.mean_tracks <= 0.0 {
            return Err(GenError { what: "mean_tracks must be positive" });
        }
        if self.displaced_mean < 0.0 {
            return Err(GenError { what: "displaced_mean must be nonnegative" });
        }
        if !(self.pt_min > 0.0 && self.pt_max >= self.pt_min) {
            return Err(GenError { what: "pt range must satisfy 0 < pt_min <= pt_max" });
        }
        if self.eta_max < 0.0 {
            return Err(GenError { what: "eta_max must be nonnegative" });
        }
        if self.flight_scale_mm < 0.0
            || self.smear_mm < 0.0
            || self.fake_scale_mm < 0.0
            || self.dir_sigma < 0.0
        {
            return Err(GenError { what: "scales must be nonnegative" });
        }
        if !self.fake_rate.is_finite() || !(0.0..=1.0).contains(&self.fake_rate) {
            return Err(GenError { what: "fake_rate outside [0, 1]" });
        }
        let sum: f64 = self.type_probs.iter().sum();
        if self.type_probs.iter().any(|&p| p < 0.0) || math::abs(sum - 1.0) > 1e-9 {
            return Err(GenError { what: "type_probs must be nonnegative and sum to 1" });
        }
        Ok(())
    }
}

/// The RNG substream for event `index` under a base seed.
pub fn event_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic right-handed orthonormal basis `(e1, e2)` of the plane
/// orthogonal to unit vector `j`, with `e1 x e2 = j`.
pub fn transverse_basis(j: Vec3) -> (Vec3, Vec3) {
    let pick = if math::abs(j.x) < 0.9 { Vec3::X } else { Vec3::Y };
    let e1 = pick.cross(j).normalized().expect("pick is never parallel to j");
    let e2 = j.cross(e1);
    (e1, e2)
}

/// Azimuthal angle of `v` about `j` in the `(e1, e2)` basis.
pub fn azimuth_about(v: Vec3, e1: Vec3, e2: Vec3) -> f64 {
    math::atan2(v.dot(e2), v.dot(e1))
}

fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    draw as usize
}

fn sample_ptype<R: Rng + ?Sized>(rng: &mut R, probs: &[f64; 3]) -> u8 {
    let u: f64 = rng.random();
    if u < probs[0] {
        PTYPE_HADRON
    } else if u < probs[0] + probs[1] {
        PTYPE_ELECTRON
    } else {
        PTYPE_MUON
    }
}

fn sample_charge<R: Rng + ?Sized>(rng: &mut R, ptype: u8) -> i8 {
    if ptype == PTYPE_HADRON && rng.random::<f64>() < NEUTRAL_HADRON_PROB {
        return 0;
    }
    if rng.random::<f64>() < 0.5 {
        1
    } else {
        -1
    }
}

/// Component of `x` orthogonal to the unit vector `d`.
fn perp(x: Vec3, d: Vec3) -> Vec3 {
    x - d * x.dot(d)
}

/// Draws one labeled event; `cfg` must have passed `validate`.
pub fn generate_event<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> JetEvent {
    let label = u8::from(rng.random::<f64>() < cfg.signal_fraction);

    let pt = rng.random_range(cfg.pt_min..=cfg.pt_max);
    let eta = rng.random_range(-cfg.eta_max..=cfg.eta_max);
    let phi = rng.random_range(0.0..core::f64::consts::TAU);
    let jet_p = Vec3::new(pt * math::cos(phi), pt * math::sin(phi), pt * math::sinh(eta));
    let jhat = jet_p.normalized().expect("pt_min > 0");
    let (e1, e2) = transverse_basis(jhat);

    let n_tracks = sample_poisson(rng, cfg.mean_tracks).clamp(1, MAX_TRACKS);
    let n_displaced = if label == 1 {
        sample_poisson(rng, cfg.displaced_mean).clamp(1, n_tracks)
    } else {
        0
    };
    let flight: f64 = cfg.flight_scale_mm * rng.sample::<f64, _>(Exp1);
    let vertex = jhat * flight;

    let mut tracks = Vec::with_capacity(n_tracks);
    for t in 0..n_tracks {
        let frac = rng.random_range(0.02..0.15);
        let g1: f64 = rng.sample(StandardNormal);
        let g2: f64 = rng.sample(StandardNormal);
        let dir = (jhat + (e1 * g1 + e2 * g2) * cfg.dir_sigma)
            .normalized()
            .expect("perturbation is orthogonal to jhat");
        let p = dir * (frac * jet_p.norm());
        let origin = if t < n_displaced {
            vertex
        } else if rng.random::<f64>() < cfg.fake_rate {
            // Spurious impact: an isotropically oriented kick with an
            // exponential magnitude, uncorrelated with every other track.
            let g = Vec3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let u = g.normalized().unwrap_or(e1);
            u * (cfg.fake_scale_mm * rng.sample::<f64, _>(Exp1))
        } else {
            Vec3::ZERO
        };
        let smear = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * cfg.smear_mm;
        let a = perp(origin + smear, dir);
        let ptype = sample_ptype(rng, &cfg.type_probs);
        let q = sample_charge(rng, ptype);
        tracks.push(Track { p, a, q, ptype });
    }

    JetEvent { jet_p, label, tracks }
}

/// Draws `n` events, one RNG substream per event index.
pub fn generate_events(cfg: &GenConfig, n: usize) -> Vec<JetEvent> {
    (0..n)
        .map(|i| {
            let mut rng = event_rng(cfg.seed, i as u64);
            generate_event(cfg, &mut rng)
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov distance between unsorted samples.
pub fn two_sample_ks(xs: &[f64], ys: &[f64]) -> f64 {
    let mut x: Vec<f64> = xs.to_vec();
    let mut y: Vec<f64> = ys.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    y.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (n1, n2) = (x.len(), y.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n1 && j < n2 {
        let (d1, d2) = (x[i], y[j]);
        if d1 <= d2 {
            while i < n1 && x[i] == d1 {
                i += 1;
            }
        }
        if d2 <= d1 {
            while j < n2 && y[j] == d2 {
                j += 1;
            }
        }
        let diff = math::abs(i as f64 / n1 as f64 - j as f64 / n2 as f64);
        if diff > d {
            d = diff;
        }
    }
    d
}

/// Asymptotic tail probability of the KS statistic (alternating series).
fn ks_tail(lambda: f64) -> f64 {
    let mut fac = 2.0;
    let mut total = 0.0;
    let mut last_term = 0.0;
    let a2 = -2.0 * lambda * lambda;
    for k in 1..=100 {
        let term = fac * math::exp(a2 * (k * k) as f64);
        total += term;
        if math::abs(term) <= 0.001 * last_term || math::abs(term) <= 1e-8 * math::abs(total) {
            return total.clamp(0.0, 1.0);
        }
        fac = -fac;
        last_term = math::abs(term);
    }
    1.0
}

/// Two-sample KS p-value from the distance and sample sizes.
pub fn ks_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    if n1 == 0 || n2 == 0 {
        return 1.0;
    }
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let sq = math::sqrt(ne);
    ks_tail((sq + 0.12 + 0.11 / sq) * d)
}

/// Result of comparing a sample to axis-rotated copies of itself.
#[derive(Debug, Clone, Copy)]
pub struct SymmetryAudit {
    /// KS distance and p-value on track-momentum azimuth about the jet axis.
    pub azimuth_d: f64,
    pub azimuth_p: f64,
    /// KS distance and p-value on impact-point magnitudes (exactly invariant
    /// under axis rotations, so this doubles as a consistency check).
    pub radial_d: f64,
    pub radial_p: f64,
}

/// Compares per-track azimuths and impact magnitudes of `events` against a
/// pool of `n_rot` copies rotated about each event's own jet axis by random
/// angles. A generator that is axially symmetric yields large p-values;
/// `n_rot = 0` compares the sample to itself (distance exactly 0).
pub fn axial_symmetry_audit(events: &[JetEvent], n_rot: usize, seed: u64) -> SymmetryAudit {
    let mut base_az = Vec::new();
    let mut base_r = Vec::new();
    for e in events {
        let j = e.axis();
        let (e1, e2) = transverse_basis(j);
        for t in &e.tracks {
            base_az.push(azimuth_about(t.p, e1, e2));
            base_r.push(t.a.norm());
        }
    }

    let mut rot_az = Vec::new();
    let mut rot_r = Vec::new();
    if n_rot == 0 {
        rot_az = base_az.clone();
        rot_r = base_r.clone();
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_rot {
            for e in events {
                let j = e.axis();
                let (e1, e2) = transverse_basis(j);
                let delta = rng.random_range(0.0..core::f64::consts::TAU);
                let r = rotation_from_axis_angle(j, delta).expect("unit axis");
                for t in &e.tracks {
                    rot_az.push(azimuth_about(r.apply_to_vector(t.p), e1, e2));
                    rot_r.push(r.apply_to_vector(t.a).norm());
                }
            }
        }
    }

    let azimuth_d = two_sample_ks(&base_az, &rot_az);
    let radial_d = two_sample_ks(&base_r, &rot_r);
    SymmetryAudit {
        azimuth_d,
        azimuth_p: ks_p_value(azimuth_d, base_az.len(), rot_az.len()),
        radial_d,
        radial_p: ks_p_value(radial_d, base_r.len(), rot_r.len()),
    }
}
