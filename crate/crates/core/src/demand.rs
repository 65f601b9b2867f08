//! Hourly billable demand in three phases: annual volumes, profile
//! assignment and seasonal modulation with noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{HOURS_PER_DAY, HOURS_PER_YEAR};
use crate::domain::SizeClass;
use crate::ids::MunicipalityId;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("national raw volume is zero; nothing to calibrate")]
    ZeroRawVolume,
    #[error("national target must be positive, got {0}")]
    BadTarget(f64),
    #[error("profile library has {have} residential profiles for class {class:?}, need 2")]
    TooFewProfiles { class: SizeClass, have: usize },
    #[error("profile library has no non-residential profiles")]
    NoNonResidential,
    #[error("profile {name}: {reason}")]
    BadProfile { name: String, reason: String },
    #[error("mixing weight must lie in [0, 1], got {0}")]
    BadWeight(f64),
    #[error("series for {0} could not be scaled to its annual volume")]
    Degenerate(MunicipalityId),
    #[error("profile file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Phase I drivers of one municipality for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct MuniDrivers {
    pub municipality: MunicipalityId,
    pub houses: f64,
    pub businesses: f64,
    /// L/house/day
    pub per_household: f64,
    /// L/business/day
    pub per_business: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualVolume {
    pub municipality: MunicipalityId,
    /// m³/year
    pub household: f64,
    /// m³/year
    pub business: f64,
}

impl AnnualVolume {
    pub fn total(&self) -> f64 {
        self.household + self.business
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualVolumePlan {
    pub volumes: Vec<AnnualVolume>,
    pub calibration: f64,
}

/// Raw volumes from premises counts, calibrated to the national target and
/// perturbed per municipality with a mean-one lognormal factor. The total is
/// renormalised to the target afterwards. Each municipality's draw comes from
/// its own sub-seed.
pub fn phase1_annual_volumes(
    drivers: &[MuniDrivers],
    national_target: f64,
    sigma: f64,
    master_seed: u64,
    year: i32,
) -> Result<AnnualVolumePlan, DemandError> {
    if !(national_target > 0.0) {
        return Err(DemandError::BadTarget(national_target));
    }
    let raw: Vec<(f64, f64)> = drivers
        .iter()
        .map(|d| (d.houses * d.per_household * 365.0 / 1000.0, d.businesses * d.per_business * 365.0 / 1000.0))
        .collect();
    let raw_total: f64 = raw.iter().map(|(h, b)| h + b).sum();
    if !(raw_total > 0.0) {
        return Err(DemandError::ZeroRawVolume);
    }
    let calibration = national_target / raw_total;
    let factors: Vec<f64> = drivers
        .iter()
        .map(|d| {
            if sigma <= 0.0 {
                return 1.0;
            }
            let mut rng = seed::stream(master_seed, "demand.volume", &format!("{}/{year}", d.municipality));
            let z: f64 = StandardNormal.sample(&mut rng);
            (sigma * z - 0.5 * sigma * sigma).exp()
        })
        .collect();
    let perturbed: f64 = raw.iter().zip(&factors).map(|((h, b), f)| (h + b) * calibration * f).sum();
    let renorm = if sigma <= 0.0 { 1.0 } else { national_target / perturbed };
    let volumes = drivers
        .iter()
        .zip(raw.iter().zip(&factors))
        .map(|(d, ((h, b), f))| AnnualVolume {
            municipality: d.municipality.clone(),
            household: h * calibration * f * renorm,
            business: b * calibration * f * renorm,
        })
        .collect();
    Ok(AnnualVolumePlan { volumes, calibration })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub samples: Vec<f64>,
}

impl Profile {
    /// Normalise to mean one.
    pub fn new(name: impl Into<String>, mut samples: Vec<f64>) -> Result<Self, DemandError> {
        let name = name.into();
        let bad = |reason: &str| DemandError::BadProfile { name: name.clone(), reason: reason.to_owned() };
        if samples.len() != HOURS_PER_YEAR {
            return Err(bad(&format!("has {} samples, expected {HOURS_PER_YEAR}", samples.len())));
        }
        if samples.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(bad("samples must be finite and non-negative"));
        }
        let mean = samples.iter().sum::<f64>() / HOURS_PER_YEAR as f64;
        if mean <= 0.0 {
            return Err(bad("mean is zero"));
        }
        for v in &mut samples {
            *v /= mean;
        }
        Ok(Self { name, samples })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileLibrary {
    pub residential: BTreeMap<SizeClass, Vec<Profile>>,
    pub non_residential: Vec<Profile>,
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let d = (hour - centre).abs().min(24.0 - (hour - centre).abs());
    (-0.5 * (d / width).powi(2)).exp()
}

impl ProfileLibrary {
    /// Parametric stand-in for measured profiles: residential double peaks
    /// whose timing and weekend lift vary per profile, and office-hours
    /// non-residential shapes.
    pub fn synthetic(per_class: usize) -> Self {
        let mut residential = BTreeMap::new();
        for (ci, class) in [SizeClass::Small, SizeClass::Medium, SizeClass::Large].into_iter().enumerate() {
            let profiles = (0..per_class)
                .map(|k| {
                    let shift = 0.5 * k as f64 - 0.25 * per_class as f64 + 0.2 * ci as f64;
                    let evening = 0.8 + 0.1 * (k % 3) as f64;
                    let weekend = 1.05 + 0.03 * (k % 4) as f64;
                    let samples = (0..HOURS_PER_YEAR)
                        .map(|h| {
                            let hour = (h % HOURS_PER_DAY) as f64 + 0.5;
                            let day = h / HOURS_PER_DAY;
                            let w = if day % 7 >= 5 { weekend } else { 1.0 };
                            let peak_shift = if day % 7 >= 5 { 1.5 } else { 0.0 };
                            w * (0.25
                                + 1.2 * bump(hour, 7.5 + shift + peak_shift, 1.3)
                                + evening * bump(hour, 19.5 + shift, 2.0)
                                + 0.2 * bump(hour, 13.0, 3.0))
                        })
                        .collect();
                    Profile::new(format!("res-{}-{k}", class_name(class)), samples).expect("synthetic profile")
                })
                .collect();
            residential.insert(class, profiles);
        }
        let non_residential = (0..per_class.max(1))
            .map(|k| {
                let open = 7.0 + (k % 3) as f64;
                let close = open + 9.0 + (k % 2) as f64;
                let samples = (0..HOURS_PER_YEAR)
                    .map(|h| {
                        let hour = (h % HOURS_PER_DAY) as f64 + 0.5;
                        let weekday = (h / HOURS_PER_DAY) % 7 < 5;
                        let working = weekday && hour > open && hour < close;
                        if working {
                            1.0 + 0.15 * bump(hour, 12.0, 2.0)
                        } else {
                            0.2
                        }
                    })
                    .collect();
                Profile::new(format!("nonres-{k}"), samples).expect("synthetic profile")
            })
            .collect();
        Self { residential, non_residential }
    }

    pub fn validate(&self) -> Result<(), DemandError> {
        for p in self.residential.values().flatten().chain(&self.non_residential) {
            Profile::new(p.name.clone(), p.samples.clone())?;
        }
        Ok(())
    }

    /// Columnar text: a header of `res:<class>:<name>` / `nonres:<name>`
    /// columns, then 8760 tab-separated rows.
    pub fn to_columns(&self) -> String {
        let mut cols: Vec<(String, &Profile)> = Vec::new();
        for (class, ps) in &self.residential {
            for p in ps {
                cols.push((format!("res:{}:{}", class_name(*class), p.name), p));
            }
        }
        for p in &self.non_residential {
            cols.push((format!("nonres:{}", p.name), p));
        }
        let mut out = cols.iter().map(|(h, _)| h.as_str()).collect::<Vec<_>>().join("\t");
        out.push('\n');
        for h in 0..HOURS_PER_YEAR {
            let row: Vec<String> = cols.iter().map(|(_, p)| format!("{}", p.samples[h])).collect();
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }

    pub fn from_columns(text: &str) -> Result<Self, DemandError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DemandError::Parse { line: 1, reason: "empty file".into() })?;
        let heads: Vec<&str> = header.split('\t').collect();
        let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(HOURS_PER_YEAR); heads.len()];
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split('\t').collect();
            if vals.len() != heads.len() {
                return Err(DemandError::Parse { line: i + 1, reason: format!("expected {} columns", heads.len()) });
            }
            for (col, v) in data.iter_mut().zip(vals) {
                col.push(v.trim().parse().map_err(|_| DemandError::Parse { line: i + 1, reason: format!("bad number {v:?}") })?);
            }
        }
        let mut lib = ProfileLibrary { residential: BTreeMap::new(), non_residential: Vec::new() };
        for (head, samples) in heads.iter().zip(data) {
            let parts: Vec<&str> = head.split(':').collect();
            match parts.as_slice() {
                ["res", class, name] => {
                    let class = parse_class(class).ok_or(DemandError::Parse { line: 1, reason: format!("bad class in {head}") })?;
                    lib.residential.entry(class).or_default().push(Profile::new(*name, samples)?);
                }
                ["nonres", name] => lib.non_residential.push(Profile::new(*name, samples)?),
                _ => return Err(DemandError::Parse { line: 1, reason: format!("bad column {head:?}") }),
            }
        }
        Ok(lib)
    }
}

fn class_name(c: SizeClass) -> &'static str {
    match c {
        SizeClass::Small => "small",
        SizeClass::Medium => "medium",
        SizeClass::Large => "large",
    }
}

fn parse_class(s: &str) -> Option<SizeClass> {
    match s {
        "small" => Some(SizeClass::Small),
        "medium" => Some(SizeClass::Medium),
        "large" => Some(SizeClass::Large),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileChoice {
    pub res_a: usize,
    pub res_b: usize,
    pub nonres: usize,
}

/// Two distinct residential profiles of the population class and one non-residential profile.
pub fn phase2_assign_profiles<R: Rng + ?Sized>(
    class: SizeClass,
    library: &ProfileLibrary,
    rng: &mut R,
) -> Result<ProfileChoice, DemandError> {
    let bucket = library.residential.get(&class).map_or(0, Vec::len);
    if bucket < 2 {
        return Err(DemandError::TooFewProfiles { class, have: bucket });
    }
    if library.non_residential.is_empty() {
        return Err(DemandError::NoNonResidential);
    }
    let pair = sample(rng, bucket, 2);
    let nonres = rng.random_range(0..library.non_residential.len());
    Ok(ProfileChoice { res_a: pair.index(0), res_b: pair.index(1), nonres })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase3Params {
    /// Fourier amplitudes of the seasonal modulation, orders 1..
    pub fourier: Vec<f64>,
    /// Day of year with peak demand.
    pub peak_day: f64,
    /// Relative change of seasonal amplitude per °C of yearly maximum temperature.
    pub climate_coefficient: f64,
    pub reference_temperature: f64,
    /// Standard deviation of the log of the hourly noise.
    pub noise_sigma: f64,
    /// Hour-to-hour autocorrelation of the log noise.
    pub noise_rho: f64,
}

impl Default for Phase3Params {
    fn default() -> Self {
        Self {
            fourier: vec![0.12, 0.03],
            peak_day: 196.0,
            climate_coefficient: 0.03,
            reference_temperature: 30.0,
            noise_sigma: 0.08,
            noise_rho: 0.8,
        }
    }
}

impl Phase3Params {
    pub fn seasonal(&self, day: usize, t_max: f64) -> f64 {
        let scale = 1.0 + self.climate_coefficient * (t_max - self.reference_temperature);
        1.0 + self
            .fourier
            .iter()
            .enumerate()
            .map(|(k, a)| a * scale * (2.0 * PI * (k + 1) as f64 * (day as f64 - self.peak_day) / 365.0).cos())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSeries {
    pub municipality: MunicipalityId,
    pub year: i32,
    /// m³/h
    pub residential: Vec<f64>,
    /// m³/h
    pub non_residential: Vec<f64>,
}

impl DemandSeries {
    pub fn at(&self, hour: usize) -> f64 {
        self.residential[hour] + self.non_residential[hour]
    }

    pub fn total(&self) -> f64 {
        self.residential.iter().sum::<f64>() + self.non_residential.iter().sum::<f64>()
    }
}

fn scale_to(series: &mut [f64], volume: f64, muni: &MunicipalityId) -> Result<(), DemandError> {
    for v in series.iter_mut() {
        *v = v.max(0.0);
    }
    if volume <= 0.0 {
        series.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let sum: f64 = series.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(DemandError::Degenerate(muni.clone()));
    }
    let k = volume / sum;
    for v in series.iter_mut() {
        *v *= k;
    }
    Ok(())
}

/// Blend the two residential profiles with weight `w`, modulate by season
/// and AR(1) lognormal noise, and scale each component to its annual volume.
#[allow(clippy::too_many_arguments)]
pub fn phase3_hourly_series<R: Rng + ?Sized>(
    volume: &AnnualVolume,
    year: i32,
    library: &ProfileLibrary,
    class: SizeClass,
    choice: ProfileChoice,
    w: f64,
    t_max: f64,
    params: &Phase3Params,
    rng: &mut R,
) -> Result<DemandSeries, DemandError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(DemandError::BadWeight(w));
    }
    let res = &library.residential[&class];
    let (a, b) = (&res[choice.res_a].samples, &res[choice.res_b].samples);
    let nonres = &library.non_residential[choice.nonres].samples;
    let mut residential = Vec::with_capacity(HOURS_PER_YEAR);
    let mut non_residential = Vec::with_capacity(HOURS_PER_YEAR);
    let sigma = params.noise_sigma.max(0.0);
    let rho = params.noise_rho.clamp(0.0, 0.999);
    let innovation = sigma * (1.0 - rho * rho).sqrt();
    let mut x = if sigma > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    } else {
        0.0
    };
    let mut seasonal = 1.0;
    for h in 0..HOURS_PER_YEAR {
        if h % HOURS_PER_DAY == 0 {
            seasonal = params.seasonal(h / HOURS_PER_DAY, t_max);
        }
        if h > 0 && sigma > 0.0 {
            let e: f64 = StandardNormal.sample(rng);
            x = rho * x + innovation * e;
        }
        let noise = if sigma > 0.0 { (x - 0.5 * sigma * sigma).exp() } else { 1.0 };
        residential.push((w * a[h] + (1.0 - w) * b[h]) * seasonal * noise);
        non_residential.push(nonres[h] * seasonal * noise);
    }
    scale_to(&mut residential, volume.household, &volume.municipality)?;
    scale_to(&mut non_residential, volume.business, &volume.municipality)?;
    Ok(DemandSeries { municipality: volume.municipality.clone(), year, residential, non_residential })
}

/// Residential mixing weight: the household share of premises.
pub fn mixing_weight(houses: f64, businesses: f64) -> f64 {
    let total = houses + businesses;
    if total > 0.0 {
        (houses / total).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn drivers(raw: &[(f64, f64)]) -> Vec<MuniDrivers> {
        raw.iter()
            .enumerate()
            .map(|(i, (h, b))| MuniDrivers {
                municipality: format!("M{i}").as_str().into(),
                houses: *h,
                businesses: *b,
                per_household: 1000.0 / 365.0,
                per_business: 1000.0 / 365.0,
            })
            .collect()
    }

    #[test]
    fn calibration_is_proportional() {
        let plan = phase1_annual_volumes(&drivers(&[(60.0, 0.0), (40.0, 0.0)]), 200.0, 0.0, 1, 2030).unwrap();
        let v: Vec<f64> = plan.volumes.iter().map(AnnualVolume::total).collect();
        assert!((v[0] - 120.0).abs() < 1e-9 && (v[1] - 80.0).abs() < 1e-9);
        assert!((plan.calibration - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perturbation_preserves_the_national_total() {
        let plan = phase1_annual_volumes(&drivers(&[(60.0, 5.0), (40.0, 1.0), (10.0, 0.0)]), 200.0, 0.05, 9, 2031).unwrap();
        let total: f64 = plan.volumes.iter().map(AnnualVolume::total).sum();
        assert!((total - 200.0).abs() <= 0.2);
        assert!(phase1_annual_volumes(&drivers(&[(0.0, 0.0)]), 200.0, 0.05, 9, 2031).is_err());
    }

    #[test]
    fn bucket_of_two_is_forced() {
        let mut lib = ProfileLibrary::synthetic(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = phase2_assign_profiles(SizeClass::Small, &lib, &mut rng).unwrap();
        let mut pair = [c.res_a, c.res_b];
        pair.sort();
        assert_eq!(pair, [0, 1]);
        lib.residential.get_mut(&SizeClass::Small).unwrap().pop();
        assert!(phase2_assign_profiles(SizeClass::Small, &lib, &mut rng).is_err());
    }

    #[test]
    fn profile_draws_are_uniform() {
        let lib = ProfileLibrary::synthetic(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        for _ in 0..1000 {
            let c = phase2_assign_profiles(SizeClass::Medium, &lib, &mut rng).unwrap();
            assert_ne!(c.res_a, c.res_b);
            counts[c.res_a] += 1;
            counts[c.res_b] += 1;
        }
        // each profile appears in 2/5 of draws
        let expected = 1000.0 * 2.0 / 5.0;
        let sd = (1000.0 * 0.4 * 0.6f64).sqrt();
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        assert!(counts.iter().all(|c| (*c as f64 - expected).abs() <= 3.0 * sd), "{counts:?}");
        assert!(chi2 < 20.0);
    }

    fn flat_library() -> ProfileLibrary {
        let flat = || Profile::new("flat", vec![1.0; HOURS_PER_YEAR]).unwrap();
        ProfileLibrary {
            residential: [(SizeClass::Small, vec![flat(), flat()])].into_iter().collect(),
            non_residential: vec![flat()],
        }
    }

    #[test]
    fn flat_noiseless_series_is_constant() {
        let lib = flat_library();
        let params = Phase3Params { fourier: vec![], noise_sigma: 0.0, ..Default::default() };
        let vol = AnnualVolume { municipality: "M".into(), household: 8760.0, business: 0.0 };
        let choice = ProfileChoice { res_a: 0, res_b: 1, nonres: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = phase3_hourly_series(&vol, 2030, &lib, SizeClass::Small, choice, 0.5, 30.0, &params, &mut rng).unwrap();
        assert!(s.residential.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!(s.non_residential.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn summer_exceeds_winter() {
        let lib = flat_library();
        let params = Phase3Params { noise_sigma: 0.0, ..Default::default() };
        let vol = AnnualVolume { municipality: "M".into(), household: 1e6, business: 1e5 };
        let choice = ProfileChoice { res_a: 0, res_b: 1, nonres: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = phase3_hourly_series(&vol, 2030, &lib, SizeClass::Small, choice, 0.5, 32.0, &params, &mut rng).unwrap();
        let mean = |from: usize, days: usize| (from * 24..(from + days) * 24).map(|h| s.at(h)).sum::<f64>() / (days * 24) as f64;
        assert!(mean(181, 31) > mean(0, 31));
        assert!((s.total() - 1.1e6).abs() / 1.1e6 < 1e-9);
    }

    #[test]
    fn scaling_is_linear_and_seeded() {
        let lib = ProfileLibrary::synthetic(3);
        let params = Phase3Params::default();
        let vol = AnnualVolume { municipality: "M".into(), household: 1e6, business: 2e5 };
        let double = AnnualVolume { household: 2e6, business: 4e5, ..vol.clone() };
        let choice = ProfileChoice { res_a: 0, res_b: 2, nonres: 1 };
        let run = |v: &AnnualVolume| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            phase3_hourly_series(v, 2030, &lib, SizeClass::Large, choice, 0.7, 31.0, &params, &mut rng).unwrap()
        };
        let (a, b, c) = (run(&vol), run(&double), run(&vol));
        assert_eq!(a, c);
        for h in 0..HOURS_PER_YEAR {
            assert_eq!(b.residential[h], 2.0 * a.residential[h]);
            assert_eq!(b.non_residential[h], 2.0 * a.non_residential[h]);
        }
    }

    #[test]
    fn weight_out_of_range_is_rejected() {
        let lib = flat_library();
        let vol = AnnualVolume { municipality: "M".into(), household: 1.0, business: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let choice = ProfileChoice { res_a: 0, res_b: 1, nonres: 0 };
        assert!(phase3_hourly_series(&vol, 2030, &lib, SizeClass::Small, choice, 1.5, 30.0, &Phase3Params::default(), &mut rng).is_err());
    }

    #[test]
    fn library_columns_round_trip() {
        let lib = ProfileLibrary::synthetic(2);
        let back = ProfileLibrary::from_columns(&lib.to_columns()).unwrap();
        assert_eq!(back.residential.len(), 3);
        assert_eq!(back.non_residential.len(), 2);
        for (x, y) in lib.residential[&SizeClass::Medium][1].samples.iter().zip(&back.residential[&SizeClass::Medium][1].samples) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(ProfileLibrary::from_columns("res:huge:x\n1\n").is_err());
    }

    #[test]
    fn synthetic_profiles_have_unit_mean() {
        let lib = ProfileLibrary::synthetic(4);
        for p in lib.residential.values().flatten().chain(&lib.non_residential) {
            assert_eq!(p.samples.len(), HOURS_PER_YEAR);
            let mean = p.samples.iter().sum::<f64>() / HOURS_PER_YEAR as f64;
            assert!((mean - 1.0).abs() < 1e-9);
        }
    }
}
