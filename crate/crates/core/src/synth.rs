//! Deterministic synthetic cohort of paired "MRI-like" images and
//! "ECG-like" traces driven by shared ground-truth factors.
//!
//! Covariate prevalences follow the UK Biobank imaging cohort summary; the
//! factors couple sex to heart size, hypertension to wall thickness and
//! atrial fibrillation to beat-interval irregularity.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MRI_SIDE: usize = 32;
pub const MRI_LEN: usize = MRI_SIDE * MRI_SIDE;
pub const ECG_LEADS: usize = 4;
pub const ECG_SAMPLES: usize = 256;
pub const ECG_LEN: usize = ECG_LEADS * ECG_SAMPLES;
pub const ECG_SAMPLE_RATE_HZ: f64 = 128.0;
pub const ECG_LEAD_NAMES: [&str; ECG_LEADS] = ["I", "II", "aVR", "V5"];
pub const MRI_RANGE: (f32, f32) = (0.0, 1.0);
pub const ECG_RANGE: (f32, f32) = (-2.0, 2.0);
/// Standard deviation of the additive acquisition noise in both modalities.
pub const NOISE_SIGMA: f64 = 0.02;
/// Pixels at or above this intensity count towards the chamber area.
pub const BRIGHT_THRESHOLD: f32 = 0.5;
pub const MIN_COHORT: usize = 30;

/// Reference split sizes of the source cohort (train, validation, test).
pub const REFERENCE_SPLIT: [usize; 3] = [26_328, 7_639, 3_807];

pub mod prevalence {
    pub const FEMALE: f64 = 0.5161;
    pub const ATRIAL_FIBRILLATION: f64 = 0.0353;
    pub const CORONARY_ARTERY_DISEASE: f64 = 0.0352;
    pub const DIABETES_TYPE2: f64 = 0.0420;
    pub const HYPERTENSION: f64 = 0.3073;
    pub const HYPERTROPHIC_CARDIOMYOPATHY: f64 = 0.0009;
}

const AGE_MEDIAN: f64 = 65.0;
const AGE_IQR: (f64, f64) = (58.0, 70.0);
const BMI_MEDIAN: f64 = 25.98;
const BMI_IQR: (f64, f64) = (23.62, 28.78);
/// Width of the central 50% of a standard normal.
const NORMAL_IQR: f64 = 1.348_979_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Split::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("bad split code {c}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ecg,
    Mri,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Ecg, Modality::Mri];

    pub fn sample_len(self) -> usize {
        match self {
            Modality::Ecg => ECG_LEN,
            Modality::Mri => MRI_LEN,
        }
    }

    pub fn value_range(self) -> (f32, f32) {
        match self {
            Modality::Ecg => ECG_RANGE,
            Modality::Mri => MRI_RANGE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ecg => "ecg",
            Modality::Mri => "mri",
        }
    }
}

/// Table-1 covariates, in their fixed on-disk order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Age,
    Bmi,
    Sex,
    AtrialFibrillation,
    CoronaryArteryDisease,
    DiabetesType2,
    Hypertension,
    HypertrophicCardiomyopathy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateValue {
    Numeric(f64),
    Category(&'static str),
}

impl Covariate {
    pub const ALL: [Covariate; 8] = [
        Covariate::Age,
        Covariate::Bmi,
        Covariate::Sex,
        Covariate::AtrialFibrillation,
        Covariate::CoronaryArteryDisease,
        Covariate::DiabetesType2,
        Covariate::Hypertension,
        Covariate::HypertrophicCardiomyopathy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Age => "age",
            Covariate::Bmi => "bmi",
            Covariate::Sex => "sex",
            Covariate::AtrialFibrillation => "atrial_fibrillation",
            Covariate::CoronaryArteryDisease => "coronary_artery_disease",
            Covariate::DiabetesType2 => "diabetes_type2",
            Covariate::Hypertension => "hypertension",
            Covariate::HypertrophicCardiomyopathy => "hypertrophic_cardiomyopathy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn kind(self) -> CovariateKind {
        match self {
            Covariate::Age | Covariate::Bmi => CovariateKind::Numeric,
            _ => CovariateKind::Categorical,
        }
    }

    /// Allowed categories; empty for numeric covariates.
    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Covariate::Age | Covariate::Bmi => &[],
            Covariate::Sex => &["female", "male"],
            _ => &["false", "true"],
        }
    }

    /// Closed value range for numeric covariates.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Covariate::Age => Some((40.0, 80.0)),
            Covariate::Bmi => Some((15.0, 50.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRecord {
    pub age: f32,
    pub bmi: f32,
    pub sex: Sex,
    pub atrial_fibrillation: bool,
    pub coronary_artery_disease: bool,
    pub diabetes_type2: bool,
    pub hypertension: bool,
    pub hypertrophic_cardiomyopathy: bool,
}

fn flag(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl CovariateRecord {
    pub fn value(&self, c: Covariate) -> CovariateValue {
        match c {
            Covariate::Age => CovariateValue::Numeric(self.age as f64),
            Covariate::Bmi => CovariateValue::Numeric(self.bmi as f64),
            Covariate::Sex => CovariateValue::Category(self.sex.as_str()),
            Covariate::AtrialFibrillation => CovariateValue::Category(flag(self.atrial_fibrillation)),
            Covariate::CoronaryArteryDisease => {
                CovariateValue::Category(flag(self.coronary_artery_disease))
            }
            Covariate::DiabetesType2 => CovariateValue::Category(flag(self.diabetes_type2)),
            Covariate::Hypertension => CovariateValue::Category(flag(self.hypertension)),
            Covariate::HypertrophicCardiomyopathy => {
                CovariateValue::Category(flag(self.hypertrophic_cardiomyopathy))
            }
        }
    }

    /// Boolean comorbidity flag; `None` for non-boolean covariates.
    pub fn flag(&self, c: Covariate) -> Option<bool> {
        match c {
            Covariate::AtrialFibrillation => Some(self.atrial_fibrillation),
            Covariate::CoronaryArteryDisease => Some(self.coronary_artery_disease),
            Covariate::DiabetesType2 => Some(self.diabetes_type2),
            Covariate::Hypertension => Some(self.hypertension),
            Covariate::HypertrophicCardiomyopathy => Some(self.hypertrophic_cardiomyopathy),
            _ => None,
        }
    }
}

/// Latent physiology behind both modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFactors {
    /// Unitless chamber size factor, `[0.5, 1.5]`.
    pub heart_scale: f32,
    /// Beats per minute, `[45, 110]`.
    pub heart_rate: f32,
    /// Myocardial wall thickness, `[0.05, 0.25]`.
    pub wall_thickness: f32,
    /// Relative beat-to-beat interval irregularity, `[0, 0.2]`; zero is sinus rhythm.
    pub rr_jitter: f32,
    /// Orientation of the long axis in degrees, `[-30, 90]`. Rotates the
    /// image and sets the electrical axis seen by the limb leads.
    pub axis_deg: f32,
    /// Short-to-long axis ratio of the chamber, `[0.6, 0.9]`.
    pub sphericity: f32,
    pub noise_seed: u64,
}

impl Default for GroundTruthFactors {
    fn default() -> Self {
        Self {
            heart_scale: 1.0,
            heart_rate: 60.0,
            wall_thickness: 0.11,
            rr_jitter: 0.0,
            axis_deg: 45.0,
            sphericity: 0.75,
            noise_seed: 0,
        }
    }
}

impl GroundTruthFactors {
    pub const HEART_SCALE_RANGE: (f32, f32) = (0.5, 1.5);
    pub const HEART_RATE_RANGE: (f32, f32) = (45.0, 110.0);
    pub const WALL_THICKNESS_RANGE: (f32, f32) = (0.05, 0.25);
    pub const RR_JITTER_RANGE: (f32, f32) = (0.0, 0.2);
    pub const AXIS_DEG_RANGE: (f32, f32) = (-30.0, 90.0);
    pub const SPHERICITY_RANGE: (f32, f32) = (0.6, 0.9);

    pub fn clamped(self) -> Self {
        let c = |v: f32, (lo, hi): (f32, f32)| if v.is_nan() { lo } else { v.clamp(lo, hi) };
        Self {
            heart_scale: c(self.heart_scale, Self::HEART_SCALE_RANGE),
            heart_rate: c(self.heart_rate, Self::HEART_RATE_RANGE),
            wall_thickness: c(self.wall_thickness, Self::WALL_THICKNESS_RANGE),
            rr_jitter: c(self.rr_jitter, Self::RR_JITTER_RANGE),
            axis_deg: c(self.axis_deg, Self::AXIS_DEG_RANGE),
            sphericity: c(self.sphericity, Self::SPHERICITY_RANGE),
            noise_seed: self.noise_seed,
        }
    }

    pub fn in_range(&self) -> bool {
        *self == self.clamped()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u64,
    pub covariates: CovariateRecord,
    pub factors: GroundTruthFactors,
    /// Row-major 32x32 image in `[0, 1]`.
    pub mri: Vec<f32>,
    /// Lead-major 4x256 trace in `[-2, 2]`.
    pub ecg: Vec<f32>,
    pub split: Split,
}

impl SubjectRecord {
    pub fn sample(&self, modality: Modality) -> &[f32] {
        match modality {
            Modality::Ecg => &self.ecg,
            Modality::Mri => &self.mri,
        }
    }
}

/// Train/validation/test counts for `n` subjects: the reference cohort's
/// proportions, floored, with the remainder handed out by largest fractional
/// part (ties go to the earlier split).
pub fn split_sizes(n: usize) -> [usize; 3] {
    let total: usize = REFERENCE_SPLIT.iter().sum();
    let mut sizes = [0usize; 3];
    let mut remainders = [0u128; 3];
    for i in 0..3 {
        let scaled = n as u128 * REFERENCE_SPLIT[i] as u128;
        sizes[i] = (scaled / total as u128) as usize;
        remainders[i] = scaled % total as u128;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_subject(seed: u64, id: u64) -> (CovariateRecord, GroundTruthFactors) {
    let mut rng = subject_rng(seed, id + 1);
    let std = Normal::new(0.0, 1.0).unwrap();
    let age_sigma = (AGE_IQR.1 - AGE_IQR.0) / NORMAL_IQR;
    let bmi = LogNormal::new(BMI_MEDIAN.ln(), (BMI_IQR.1.ln() - BMI_IQR.0.ln()) / NORMAL_IQR)
        .unwrap();

    let sex = if rng.random_bool(prevalence::FEMALE) {
        Sex::Female
    } else {
        Sex::Male
    };
    let age = (AGE_MEDIAN + age_sigma * std.sample(&mut rng)).clamp(40.0, 80.0);
    let bmi = bmi.sample(&mut rng).clamp(15.0, 50.0);
    let covariates = CovariateRecord {
        age: age as f32,
        bmi: bmi as f32,
        sex,
        atrial_fibrillation: rng.random_bool(prevalence::ATRIAL_FIBRILLATION),
        coronary_artery_disease: rng.random_bool(prevalence::CORONARY_ARTERY_DISEASE),
        diabetes_type2: rng.random_bool(prevalence::DIABETES_TYPE2),
        hypertension: rng.random_bool(prevalence::HYPERTENSION),
        hypertrophic_cardiomyopathy: rng.random_bool(prevalence::HYPERTROPHIC_CARDIOMYOPATHY),
    };

    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let c = &covariates;
    let base_scale = match sex {
        Sex::Male => 1.15,
        Sex::Female => 0.90,
    };
    let heart_scale = base_scale
        + 0.07 * std.sample(&mut rng)
        + 0.10 * on(c.atrial_fibrillation)
        + 0.08 * on(c.coronary_artery_disease)
        + 0.06 * on(c.diabetes_type2);
    let wall_thickness = 0.10
        + 0.015 * std.sample(&mut rng)
        + 0.05 * on(c.hypertension)
        + 0.08 * on(c.hypertrophic_cardiomyopathy)
        + 0.02 * on(c.diabetes_type2)
        + 0.015 * on(c.coronary_artery_disease);
    let rate_noise = std.sample(&mut rng);
    let rr_jitter = if c.atrial_fibrillation {
        0.08 + 0.06 * rng.random::<f64>()
    } else {
        0.0
    };
    let axis_deg = 40.0 + 20.0 * std.sample(&mut rng) - 10.0 * on(c.hypertension);
    // A rounder (remodelled) ventricle goes with a faster resting rate, so
    // most heart-rate variation is visible in both modalities.
    let remodelling = std.sample(&mut rng);
    let sphericity = 0.75 + 0.06 * remodelling + 0.05 * on(c.coronary_artery_disease);
    let heart_rate = 66.0
        + 7.0 * remodelling
        + 1.5 * rate_noise
        + 14.0 * on(c.atrial_fibrillation)
        + 5.0 * on(c.diabetes_type2);
    let factors = GroundTruthFactors {
        heart_scale: heart_scale as f32,
        heart_rate: heart_rate as f32,
        wall_thickness: wall_thickness as f32,
        rr_jitter: rr_jitter as f32,
        axis_deg: axis_deg as f32,
        sphericity: sphericity as f32,
        noise_seed: rng.next_u64(),
    }
    .clamped();
    (covariates, factors)
}

/// Generates `n` subjects with dense ids `0..n`.
pub fn generate_cohort(n: usize, seed: u64) -> Result<Dataset> {
    if n < MIN_COHORT {
        return Err(Error::invalid(format!(
            "cohort size {n} is below the minimum of {MIN_COHORT}"
        )));
    }
    let sizes = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut subject_rng(seed, 0));
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
    }

    let subjects = (0..n)
        .map(|i| {
            let id = i as u64;
            let (covariates, factors) = sample_subject(seed, id);
            SubjectRecord {
                id,
                covariates,
                mri: render_mri(&factors),
                ecg: render_ecg(&factors),
                factors,
                split: splits[i],
            }
        })
        .collect();
    Ok(Dataset { seed, subjects })
}

// Noise streams are keyed by the subject's noise seed; one stream per modality.
const MRI_NOISE_STREAM: u64 = 1;
const ECG_NOISE_STREAM: u64 = 2;
const ECG_RHYTHM_STREAM: u64 = 3;

const MRI_BACKGROUND: f64 = 0.08;
const MRI_MYOCARDIUM: f64 = 0.35;
const MRI_BLOOD_POOL: f64 = 0.92;

/// Signed distance (pixels, negative inside) to an axis-aligned ellipse,
/// first-order approximation.
fn ellipse_distance(dx: f64, dy: f64, a: f64, b: f64) -> f64 {
    let rho = ((dx / a).powi(2) + (dy / b).powi(2)).sqrt();
    if rho < 1e-12 {
        return -a.min(b);
    }
    let gx = dx / (a * a * rho);
    let gy = dy / (b * b * rho);
    (rho - 1.0) / (gx * gx + gy * gy).sqrt()
}

fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

/// Short-axis-like rendering: bright blood pool inside a darker myocardial
/// ring, with standard acquisition noise.
pub fn render_mri(factors: &GroundTruthFactors) -> Vec<f32> {
    render_mri_with_noise(factors, NOISE_SIGMA)
}

pub fn render_mri_with_noise(factors: &GroundTruthFactors, noise_sigma: f64) -> Vec<f32> {
    let f = factors.clamped();
    let scale = f.heart_scale as f64;
    let a = 7.0 * scale;
    let b = a * f.sphericity as f64;
    let wall = 14.0 * f.wall_thickness as f64;
    // Image rows grow downwards; the long axis points down-left at positive angles.
    let (sin, cos) = (f.axis_deg as f64).to_radians().sin_cos();
    let centre = (MRI_SIDE as f64 - 1.0) / 2.0;
    let mut rng = subject_rng(f.noise_seed, MRI_NOISE_STREAM);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).unwrap();
    let mut img = Vec::with_capacity(MRI_LEN);
    for row in 0..MRI_SIDE {
        for col in 0..MRI_SIDE {
            let (x, y) = (col as f64 - centre, row as f64 - centre);
            let dx = x * cos + y * sin;
            let dy = -x * sin + y * cos;
            let inner = coverage(ellipse_distance(dx, dy, a, b));
            let outer = coverage(ellipse_distance(dx, dy, a + wall, b + wall));
            let mut v = MRI_BACKGROUND
                + (MRI_MYOCARDIUM - MRI_BACKGROUND) * outer
                + (MRI_BLOOD_POOL - MRI_MYOCARDIUM) * inner;
            if noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            img.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

/// Number of pixels at or above [`BRIGHT_THRESHOLD`].
pub fn bright_area(image: &[f32]) -> usize {
    image.iter().filter(|&&v| v >= BRIGHT_THRESHOLD).count()
}

struct Wave {
    offset_s: f64,
    width_s: f64,
    /// Per-lead amplitude before factor scaling.
    amplitude: [f64; ECG_LEADS],
}

const P_WAVE: Wave = Wave {
    offset_s: -0.16,
    width_s: 0.025,
    amplitude: [0.10, 0.15, -0.12, 0.08],
};
const Q_WAVE: Wave = Wave {
    offset_s: -0.03,
    width_s: 0.008,
    amplitude: [-0.08, -0.10, 0.08, -0.12],
};
// Limb-lead R and T amplitudes follow the electrical axis; see `axis_projection`.
const R_WAVE: Wave = Wave {
    offset_s: 0.0,
    width_s: 0.0, // set from heart_scale
    amplitude: [1.3, 1.3, 1.3, 1.0],
};
const S_WAVE: Wave = Wave {
    offset_s: 0.03,
    width_s: 0.010,
    amplitude: [-0.15, -0.20, 0.15, -0.35],
};
const T_WAVE: Wave = Wave {
    offset_s: 0.26,
    width_s: 0.04,
    amplitude: [0.35, 0.35, 0.35, 0.30],
};

/// Frontal-plane angles of the limb leads (I, II, aVR) in degrees.
const LIMB_LEAD_ANGLES: [f64; 3] = [0.0, 60.0, -150.0];

/// Projection of the cardiac vector onto each lead. The precordial lead
/// instead responds to chamber shape.
fn axis_projection(axis_deg: f64, sphericity: f64) -> [f64; ECG_LEADS] {
    let mut p = [0.0; ECG_LEADS];
    for (out, angle) in p.iter_mut().zip(LIMB_LEAD_ANGLES) {
        *out = (angle - axis_deg).to_radians().cos();
    }
    p[3] = 1.9 - 1.2 * sphericity;
    p
}

/// Sample index of the first R peak in every trace.
pub const FIRST_R_PEAK: f64 = 20.0;

/// Positions (in samples) of the R peaks, padded by two beats on each side.
pub fn beat_positions(factors: &GroundTruthFactors) -> Vec<f64> {
    let f = factors.clamped();
    let period = ECG_SAMPLE_RATE_HZ * 60.0 / f.heart_rate as f64;
    // Recordings are triggered on the first R peak.
    let first = FIRST_R_PEAK;
    let end = ECG_SAMPLES as f64 + 2.0 * period;
    let mut beats = Vec::new();
    if f.rr_jitter <= 0.0 {
        let mut k = -2i64;
        loop {
            let t = first + k as f64 * period;
            if t >= end {
                break;
            }
            beats.push(t);
            k += 1;
        }
    } else {
        let mut rng = subject_rng(f.noise_seed, ECG_RHYTHM_STREAM);
        let jitter = f.rr_jitter as f64;
        let mut t = first - 2.0 * period;
        while t < end {
            beats.push(t);
            t += period * (1.0 + jitter * rng.random_range(-1.0..1.0));
        }
    }
    beats
}

/// Four-lead trace: Gaussian P/QRS/T complexes at each beat plus noise.
pub fn render_ecg(factors: &GroundTruthFactors) -> Vec<f32> {
    render_ecg_with_noise(factors, NOISE_SIGMA)
}

pub fn render_ecg_with_noise(factors: &GroundTruthFactors, noise_sigma: f64) -> Vec<f32> {
    let f = factors.clamped();
    let scale = f.heart_scale as f64;
    let wall = f.wall_thickness as f64;
    // Absent atrial activity under irregular rhythm.
    let p_gain = 1.0 - (f.rr_jitter as f64 / 0.05).min(1.0);
    let r_width = 0.010 + 0.006 * scale;
    let projection = axis_projection(f.axis_deg as f64, f.sphericity as f64);
    let flat = [1.0; ECG_LEADS];
    let waves = [
        (&P_WAVE, P_WAVE.width_s, p_gain, flat),
        (&Q_WAVE, Q_WAVE.width_s, 1.0, flat),
        (&R_WAVE, r_width, 0.4 + 0.6 * scale, projection),
        (&S_WAVE, S_WAVE.width_s, 0.5 + 4.0 * wall, flat),
        (&T_WAVE, T_WAVE.width_s, 1.2 - 4.0 * wall, projection),
    ];
    let beats = beat_positions(&f);

    let mut clean = [[0.0f64; ECG_SAMPLES]; ECG_LEADS];
    for &(wave, width_s, gain, lead_gain) in &waves {
        if gain == 0.0 {
            continue;
        }
        let centre_offset = wave.offset_s * ECG_SAMPLE_RATE_HZ;
        let sigma = width_s * ECG_SAMPLE_RATE_HZ;
        let reach = 5.0 * sigma;
        for &beat in &beats {
            let centre = beat + centre_offset;
            let lo = (centre - reach).ceil().max(0.0) as usize;
            let hi = ((centre + reach).floor()).min(ECG_SAMPLES as f64 - 1.0);
            if hi < 0.0 || (lo as f64) > hi {
                continue;
            }
            for i in lo..=hi as usize {
                let z = (i as f64 - centre) / sigma;
                let shape = gain * (-0.5 * z * z).exp();
                for lead in 0..ECG_LEADS {
                    clean[lead][i] += wave.amplitude[lead] * lead_gain[lead] * shape;
                }
            }
        }
    }

    let mut rng = subject_rng(f.noise_seed, ECG_NOISE_STREAM);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).unwrap();
    let mut out = Vec::with_capacity(ECG_LEN);
    for lead in clean.iter() {
        for &v in lead.iter() {
            let v = if noise_sigma > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            };
            out.push(v.clamp(ECG_RANGE.0 as f64, ECG_RANGE.1 as f64) as f32);
        }
    }
    out
}

/// Bytes per subject in `subjects.bin`.
pub const RECORD_BYTES: usize = 8 + 4 + 4 + 1 + 5 + 1 + 6 * 4 + 8 + 4 * MRI_LEN + 4 * ECG_LEN;

pub const RECORD_LAYOUT: [&str; 19] = [
    "id:u64",
    "age:f32",
    "bmi:f32",
    "sex:u8(0=female,1=male)",
    "atrial_fibrillation:u8",
    "coronary_artery_disease:u8",
    "diabetes_type2:u8",
    "hypertension:u8",
    "hypertrophic_cardiomyopathy:u8",
    "split:u8(0=train,1=validation,2=test)",
    "heart_scale:f32",
    "heart_rate:f32",
    "wall_thickness:f32",
    "rr_jitter:f32",
    "axis_deg:f32",
    "sphericity:f32",
    "noise_seed:u64",
    "mri:f32[32x32]",
    "ecg:f32[4x256]",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchemaEntry {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
}

pub fn covariate_schema() -> Vec<CovariateSchemaEntry> {
    Covariate::ALL
        .iter()
        .map(|c| CovariateSchemaEntry {
            name: c.name().to_string(),
            kind: match c.kind() {
                CovariateKind::Numeric => "numeric".into(),
                CovariateKind::Categorical => "categorical".into(),
            },
            categories: c.categories().iter().map(|s| s.to_string()).collect(),
            range: c.range(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub seed: u64,
    pub split_sizes: SplitCounts,
    pub record_bytes: usize,
    pub record_layout: Vec<String>,
    pub mri_shape: [usize; 2],
    pub ecg_shape: [usize; 2],
    pub covariate_schema: Vec<CovariateSchemaEntry>,
    /// SHA-256 of `subjects.bin`.
    pub fingerprint: String,
}

pub const DATASET_FORMAT: &str = "xmodal-cohort-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUBJECTS_FILE: &str = "subjects.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Subject by id. Ids are dense, so this is an index lookup.
    pub fn get(&self, id: u64) -> Option<&SubjectRecord> {
        self.subjects.get(id as usize).filter(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.subjects.iter().map(|s| s.id).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&SubjectRecord> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_counts(&self) -> SplitCounts {
        let count = |sp| self.subjects.iter().filter(|s| s.split == sp).count();
        SplitCounts {
            train: count(Split::Train),
            validation: count(Split::Validation),
            test: count(Split::Test),
        }
    }

    pub fn encode_subjects(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.len() * RECORD_BYTES);
        for s in &self.subjects {
            write_record(&mut buf, s);
        }
        buf
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.encode_subjects()))
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest_with_fingerprint(self.fingerprint())
    }

    fn manifest_with_fingerprint(&self, fingerprint: String) -> Manifest {
        Manifest {
            format: DATASET_FORMAT.into(),
            count: self.len(),
            seed: self.seed,
            split_sizes: self.split_counts(),
            record_bytes: RECORD_BYTES,
            record_layout: RECORD_LAYOUT.iter().map(|s| s.to_string()).collect(),
            mri_shape: [MRI_SIDE, MRI_SIDE],
            ecg_shape: [ECG_LEADS, ECG_SAMPLES],
            covariate_schema: covariate_schema(),
            fingerprint,
        }
    }

    /// Writes `manifest.json` and `subjects.bin` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let bytes = self.encode_subjects();
        let manifest = self.manifest_with_fingerprint(hex::encode(Sha256::digest(&bytes)));
        fs::write(dir.join(SUBJECTS_FILE), &bytes)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {:?}", manifest.format)));
        }
        if manifest.record_bytes != RECORD_BYTES {
            return Err(Error::Format(format!(
                "record size {} does not match {RECORD_BYTES}",
                manifest.record_bytes
            )));
        }
        let bytes = fs::read(dir.join(SUBJECTS_FILE))?;
        if bytes.len() != manifest.count * RECORD_BYTES {
            return Err(Error::Format(format!(
                "{SUBJECTS_FILE} holds {} bytes, expected {} records",
                bytes.len(),
                manifest.count
            )));
        }
        let fingerprint = hex::encode(Sha256::digest(&bytes));
        if fingerprint != manifest.fingerprint {
            return Err(Error::Format("subjects.bin does not match manifest fingerprint".into()));
        }
        let subjects = bytes
            .chunks_exact(RECORD_BYTES)
            .enumerate()
            .map(|(i, chunk)| {
                let s = read_record(chunk)?;
                if s.id != i as u64 {
                    return Err(Error::Format(format!("record {i} carries id {}", s.id)));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            seed: manifest.seed,
            subjects,
        };
        if ds.split_counts() != manifest.split_sizes {
            return Err(Error::Format("split counts disagree with manifest".into()));
        }
        Ok(ds)
    }
}

fn write_record(buf: &mut Vec<u8>, s: &SubjectRecord) {
    let c = &s.covariates;
    let f = &s.factors;
    buf.extend_from_slice(&s.id.to_le_bytes());
    buf.extend_from_slice(&c.age.to_le_bytes());
    buf.extend_from_slice(&c.bmi.to_le_bytes());
    buf.push(match c.sex {
        Sex::Female => 0,
        Sex::Male => 1,
    });
    for b in [
        c.atrial_fibrillation,
        c.coronary_artery_disease,
        c.diabetes_type2,
        c.hypertension,
        c.hypertrophic_cardiomyopathy,
    ] {
        buf.push(b as u8);
    }
    buf.push(s.split.code());
    for v in [
        f.heart_scale,
        f.heart_rate,
        f.wall_thickness,
        f.rr_jitter,
        f.axis_deg,
        f.sphericity,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&f.noise_seed.to_le_bytes());
    for v in s.mri.iter().chain(&s.ecg) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8() {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("bad boolean byte {b}"))),
        }
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
}

fn read_record(chunk: &[u8]) -> Result<SubjectRecord> {
    let mut c = Cursor { bytes: chunk, pos: 0 };
    let id = c.u64();
    let age = c.f32();
    let bmi = c.f32();
    let sex = match c.u8() {
        0 => Sex::Female,
        1 => Sex::Male,
        b => return Err(Error::Format(format!("bad sex code {b}"))),
    };
    let covariates = CovariateRecord {
        age,
        bmi,
        sex,
        atrial_fibrillation: c.bool()?,
        coronary_artery_disease: c.bool()?,
        diabetes_type2: c.bool()?,
        hypertension: c.bool()?,
        hypertrophic_cardiomyopathy: c.bool()?,
    };
    let split = Split::from_code(c.u8())?;
    let factors = GroundTruthFactors {
        heart_scale: c.f32(),
        heart_rate: c.f32(),
        wall_thickness: c.f32(),
        rr_jitter: c.f32(),
        axis_deg: c.f32(),
        sphericity: c.f32(),
        noise_seed: c.u64(),
    };
    let mri = (0..MRI_LEN).map(|_| c.f32()).collect();
    let ecg = (0..ECG_LEN).map(|_| c.f32()).collect();
    Ok(SubjectRecord {
        id,
        covariates,
        factors,
        mri,
        ecg,
        split,
    })
}
