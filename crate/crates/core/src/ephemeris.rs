//! Solar position from geographic coordinates and UTC time.
//!
//! Implements the low-accuracy NOAA/Meeus solar series (~0.01° intrinsic
//! accuracy), which is far below the 2° bin resolution this toolkit feeds.
//! Altitude is geometric (non-refracted) by default; an optional Bennett
//! refraction correction is available for callers that want apparent
//! altitude. ΔT (TT−UT) is a fixed 69 s and leap seconds are ignored; both
//! contribute ≪ 0.01°.

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unix epoch as a Julian day.
const JD_UNIX_EPOCH: f64 = 2440587.5;
/// Validity window: [1950-01-01, 2100-01-01) as unix seconds.
const WINDOW_MIN_UNIX: i64 = -631_152_000;
const WINDOW_MAX_UNIX: i64 = 4_102_444_800;
/// The same window as Julian days.
const WINDOW_MIN_JD: f64 = 2_433_282.5;
const WINDOW_MAX_JD: f64 = 2_488_069.5;
/// Fixed TT−UT offset, seconds.
const DELTA_T_SECONDS: f64 = 69.0;

/// A validated observation point: geographic coordinates plus a UTC instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTime {
    latitude_deg: f64,
    longitude_deg: f64,
    utc: DateTime<Utc>,
}

impl GeoTime {
    pub fn new(latitude_deg: f64, longitude_deg: f64, utc: DateTime<Utc>) -> Result<Self> {
        if !latitude_deg.is_finite() || !(-90.0..=90.0).contains(&latitude_deg) {
            return Err(Error::domain(format!(
                "latitude {latitude_deg} outside [-90, 90]"
            )));
        }
        if !longitude_deg.is_finite() || !(-180.0..=180.0).contains(&longitude_deg) {
            return Err(Error::domain(format!(
                "longitude {longitude_deg} outside [-180, 180]"
            )));
        }
        check_window(utc)?;
        Ok(GeoTime { latitude_deg, longitude_deg, utc })
    }

    pub fn latitude_deg(&self) -> f64 {
        self.latitude_deg
    }

    pub fn longitude_deg(&self) -> f64 {
        self.longitude_deg
    }

    pub fn utc(&self) -> DateTime<Utc> {
        self.utc
    }
}

/// Solar position at an instant, with enough intermediates to audit the
/// spherical altitude formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarPosition {
    pub altitude_deg: f64,
    pub declination_deg: f64,
    pub hour_angle_deg: f64,
    pub julian_day: f64,
}

fn check_window(utc: DateTime<Utc>) -> Result<()> {
    let s = utc.timestamp();
    if !(WINDOW_MIN_UNIX..WINDOW_MAX_UNIX).contains(&s) {
        return Err(Error::domain(format!(
            "timestamp {} outside validity window [1950-01-01, 2100-01-01)",
            utc.to_rfc3339_opts(SecondsFormat::Secs, true)
        )));
    }
    Ok(())
}

/// Continuous Julian day (UT) of a UTC instant, including the fractional day.
pub fn julian_day(utc: DateTime<Utc>) -> Result<f64> {
    check_window(utc)?;
    let seconds = utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) * 1e-9;
    Ok(JD_UNIX_EPOCH + seconds / 86_400.0)
}

fn deg_sin(d: f64) -> f64 {
    d.to_radians().sin()
}

fn deg_cos(d: f64) -> f64 {
    d.to_radians().cos()
}

/// Solar declination (degrees) and equation of time (minutes) at a UT Julian
/// day. ΔT is applied internally before evaluating the series.
pub fn solar_coordinates(jd: f64) -> Result<(f64, f64)> {
    if !jd.is_finite() || !(WINDOW_MIN_JD..WINDOW_MAX_JD).contains(&jd) {
        return Err(Error::domain(format!(
            "julian day {jd} outside validity window [1950-01-01, 2100-01-01)"
        )));
    }
    let jd_tt = jd + DELTA_T_SECONDS / 86_400.0;
    let t = (jd_tt - 2_451_545.0) / 36_525.0;

    let mean_long = (280.46646 + t * (36_000.76983 + t * 0.000_3032)).rem_euclid(360.0);
    let mean_anom = 357.52911 + t * (35_999.05029 - 0.000_1537 * t);
    let eccentricity = 0.016_708_634 - t * (0.000_042_037 + 0.000_000_126_7 * t);

    let center = deg_sin(mean_anom) * (1.914_602 - t * (0.004_817 + 0.000_014 * t))
        + deg_sin(2.0 * mean_anom) * (0.019_993 - 0.000_101 * t)
        + deg_sin(3.0 * mean_anom) * 0.000_289;
    let true_long = mean_long + center;

    let omega = 125.04 - 1_934.136 * t;
    let apparent_long = true_long - 0.005_69 - 0.004_78 * deg_sin(omega);

    let mean_obliquity = 23.0
        + (26.0 + (21.448 - t * (46.8150 + t * (0.000_59 - t * 0.001_813))) / 60.0) / 60.0;
    let obliquity = mean_obliquity + 0.002_56 * deg_cos(omega);

    let declination = (deg_sin(obliquity) * deg_sin(apparent_long)).asin().to_degrees();

    let y = (obliquity / 2.0).to_radians().tan().powi(2);
    let l0 = mean_long.to_radians();
    let m = mean_anom.to_radians();
    let eot_rad = y * (2.0 * l0).sin() - 2.0 * eccentricity * m.sin()
        + 4.0 * eccentricity * y * m.sin() * (2.0 * l0).cos()
        - 0.5 * y * y * (4.0 * l0).sin()
        - 1.25 * eccentricity * eccentricity * (2.0 * m).sin();
    let eot_minutes = 4.0 * eot_rad.to_degrees();

    Ok((declination, eot_minutes))
}

/// Geometric solar altitude at an observation point.
pub fn solar_altitude(gt: &GeoTime) -> Result<SolarPosition> {
    let jd = julian_day(gt.utc)?;
    let (declination_deg, eot_minutes) = solar_coordinates(jd)?;

    let day_frac = (jd + 0.5).fract();
    let true_solar_minutes =
        (day_frac * 1_440.0 + eot_minutes + 4.0 * gt.longitude_deg).rem_euclid(1_440.0);
    let hour_angle_deg = true_solar_minutes / 4.0 - 180.0;

    let sin_alt = deg_sin(gt.latitude_deg) * deg_sin(declination_deg)
        + deg_cos(gt.latitude_deg) * deg_cos(declination_deg) * deg_cos(hour_angle_deg);
    let altitude_deg = sin_alt.clamp(-1.0, 1.0).asin().to_degrees();

    Ok(SolarPosition { altitude_deg, declination_deg, hour_angle_deg, julian_day: jd })
}

/// Bennett's refraction correction (degrees) for a geometric altitude; valid
/// down to the horizon, where it peaks near 0.57°.
pub fn bennett_refraction_deg(altitude_deg: f64) -> f64 {
    if altitude_deg < -1.0 {
        return 0.0;
    }
    let arg = altitude_deg + 7.31 / (altitude_deg + 4.4);
    (1.0 / arg.to_radians().tan()) / 60.0
}

/// Apparent solar altitude: geometric altitude plus Bennett refraction.
pub fn solar_altitude_refracted(gt: &GeoTime) -> Result<SolarPosition> {
    let mut pos = solar_altitude(gt)?;
    pos.altitude_deg += bennett_refraction_deg(pos.altitude_deg);
    Ok(pos)
}

/// One metadata record as carried by the JSONL interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoSample {
    pub lat: f64,
    pub lon: f64,
    pub utc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl GeoSample {
    pub fn geo_time(&self) -> Result<GeoTime> {
        let utc = DateTime::parse_from_rfc3339(&self.utc)
            .map_err(|e| Error::domain(format!("bad utc timestamp {:?}: {e}", self.utc)))?
            .with_timezone(&Utc);
        GeoTime::new(self.lat, self.lon, utc)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags
            .as_ref()
            .is_some_and(|ts| ts.iter().any(|t| t.eq_ignore_ascii_case(tag)))
    }
}

/// A record that failed to label, with its position in the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub index: usize,
    pub message: String,
}

/// Result of labeling a batch in lenient mode: surviving records in input
/// order plus the per-record failures.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutcome {
    pub labeled: Vec<GeoSample>,
    pub errors: Vec<RecordError>,
}

/// Populate `altitude_deg` (rounded to 4 decimal places) for each record. In
/// strict mode the first invalid record aborts the batch; otherwise bad
/// records are reported by index and the rest continue in order. Existing
/// altitude values are recomputed, so labeling is idempotent.
pub fn label_batch(records: Vec<GeoSample>, strict: bool) -> Result<LabelOutcome> {
    let mut labeled = Vec::with_capacity(records.len());
    let mut errors = Vec::new();
    for (index, mut rec) in records.into_iter().enumerate() {
        let pos = rec.geo_time().and_then(|gt| solar_altitude(&gt));
        match pos {
            Ok(pos) => {
                rec.altitude_deg = Some(round4(pos.altitude_deg));
                labeled.push(rec);
            }
            Err(e) => {
                if strict {
                    return Err(Error::Record { index, msg: e.to_string() });
                }
                errors.push(RecordError { index, message: e.to_string() });
            }
        }
    }
    Ok(LabelOutcome { labeled, errors })
}

/// Round to 4 decimal places, the precision of the JSONL interchange format.
pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Parse JSONL metadata records. Line numbers in errors are 1-based; blank
/// lines are skipped.
pub fn read_jsonl(text: &str) -> Result<Vec<GeoSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GeoSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Serialize records as JSONL, one object per line.
pub fn write_jsonl(records: &[GeoSample]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).unwrap());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn utc(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
    }

    #[test]
    fn julian_day_epochs() {
        assert_eq!(julian_day(utc(2000, 1, 1, 12, 0, 0)).unwrap(), 2_451_545.0);
        assert_eq!(julian_day(utc(2000, 1, 2, 12, 0, 0)).unwrap(), 2_451_546.0);
        // Pinned against an independent Julian-date conversion.
        assert!((julian_day(utc(2024, 6, 21, 0, 0, 0)).unwrap() - 2_460_482.5).abs() < 1e-6);
    }

    #[test]
    fn julian_day_strictly_increasing() {
        let a = julian_day(utc(2024, 6, 21, 0, 0, 0)).unwrap();
        let b = julian_day(utc(2024, 6, 21, 0, 0, 1)).unwrap();
        assert!(b > a);
        // One ulp at JD ≈ 2.46e6 is ~5e-10 days, so the difference of two
        // absolute Julian days resolves one second only to that scale.
        assert!((b - a - 1.0 / 86_400.0).abs() < 1e-9);
    }

    #[test]
    fn validity_window_is_enforced() {
        assert!(julian_day(utc(1949, 12, 31, 23, 59, 59)).is_err());
        assert!(julian_day(utc(1950, 1, 1, 0, 0, 0)).is_ok());
        assert!(julian_day(utc(2099, 12, 31, 23, 59, 59)).is_ok());
        assert!(julian_day(utc(2100, 1, 1, 0, 0, 0)).is_err());
        assert!(solar_coordinates(2_400_000.0).is_err());
    }

    #[test]
    fn declination_at_solstice_and_equinox() {
        // 2024 June solstice: 2024-06-20T20:51Z.
        let jd = julian_day(utc(2024, 6, 20, 20, 51, 0)).unwrap();
        let (decl, _) = solar_coordinates(jd).unwrap();
        assert!((decl - 23.44).abs() < 0.1, "solstice declination {decl}");

        // 2024 March equinox: 2024-03-20T03:07Z.
        let jd = julian_day(utc(2024, 3, 20, 3, 7, 0)).unwrap();
        let (decl, _) = solar_coordinates(jd).unwrap();
        assert!(decl.abs() < 0.3, "equinox declination {decl}");
    }

    #[test]
    fn equation_of_time_near_annual_maximum() {
        // Pinned by an independent almanac-series computation: +16.4451 min
        // at 2023-11-03T12:00Z. The two published series agree to ~0.1 min.
        let jd = julian_day(utc(2023, 11, 3, 12, 0, 0)).unwrap();
        let (decl, eot) = solar_coordinates(jd).unwrap();
        assert!((eot - 16.4451).abs() < 0.2, "eot {eot}");
        assert!((decl - -15.0635).abs() < 0.1, "declination {decl}");
    }

    #[test]
    fn coordinates_stay_in_physical_bounds_over_a_year() {
        let start = julian_day(utc(2024, 1, 1, 0, 0, 0)).unwrap();
        for i in 0..1000 {
            let jd = start + i as f64 * 0.366;
            let (decl, eot) = solar_coordinates(jd).unwrap();
            assert!((-23.55..=23.55).contains(&decl), "declination {decl} at {jd}");
            assert!((-20.0..=20.0).contains(&eot), "eot {eot} at {jd}");
        }
    }

    /// Scan a UTC day at 1-minute resolution for the maximum altitude.
    fn daily_max(lat: f64, lon: f64, y: i32, mo: u32, d: u32) -> f64 {
        let mut best = -90.0f64;
        for minute in 0..1440 {
            let gt = GeoTime::new(lat, lon, utc(y, mo, d, minute / 60, minute % 60, 0)).unwrap();
            best = best.max(solar_altitude(&gt).unwrap().altitude_deg);
        }
        best
    }

    #[test]
    fn meridian_altitude_on_the_solstice() {
        // 90° − φ + δ at culmination: 90 − 48.137 + 23.44 = 65.30.
        let max = daily_max(48.137, 11.575, 2024, 6, 20);
        assert!((max - 65.30).abs() < 0.3, "meridian altitude {max}");
    }

    #[test]
    fn subsolar_point_reaches_zenith() {
        let jd = julian_day(utc(2024, 6, 20, 20, 51, 0)).unwrap();
        let (decl, _) = solar_coordinates(jd).unwrap();
        let max = daily_max(decl, 0.0, 2024, 6, 20);
        assert!((max - 90.0).abs() < 0.3, "zenith altitude {max}");
    }

    #[test]
    fn stored_components_satisfy_spherical_formula() {
        for (lat, lon, ts) in [
            (48.137, 11.575, utc(2024, 6, 20, 12, 0, 0)),
            (-33.86, 151.21, utc(2019, 1, 3, 2, 30, 0)),
            (69.65, 18.96, utc(2022, 12, 21, 11, 0, 0)),
            (0.0, 0.0, utc(1987, 3, 21, 6, 0, 0)),
        ] {
            let gt = GeoTime::new(lat, lon, ts).unwrap();
            let p = solar_altitude(&gt).unwrap();
            let lhs = p.altitude_deg.to_radians().sin();
            let rhs = lat.to_radians().sin() * p.declination_deg.to_radians().sin()
                + lat.to_radians().cos()
                    * p.declination_deg.to_radians().cos()
                    * p.hour_angle_deg.to_radians().cos();
            assert!((lhs - rhs).abs() < 1e-9, "residual {}", lhs - rhs);
        }
    }

    #[test]
    fn altitude_is_daily_periodic_up_to_declination_drift() {
        for (lat, lon) in [(48.137, 11.575), (-45.0, 170.5), (10.0, -60.0)] {
            for hour in [0, 6, 13, 21] {
                let t0 = utc(2024, 4, 10, hour, 17, 0);
                let t1 = t0 + chrono::Duration::hours(24);
                let a0 = solar_altitude(&GeoTime::new(lat, lon, t0).unwrap()).unwrap();
                let a1 = solar_altitude(&GeoTime::new(lat, lon, t1).unwrap()).unwrap();
                let d = (a0.altitude_deg - a1.altitude_deg).abs();
                assert!(d <= 0.5, "24h drift {d} at lat {lat} hour {hour}");
            }
        }
    }

    #[test]
    fn equinox_noon_symmetry_at_the_equator() {
        // Find true solar noon via the hour angle, then probe ±Δ around it.
        let day = utc(2024, 3, 20, 0, 0, 0);
        let mut noon = day;
        let mut best = 360.0f64;
        for minute in 0..1440 {
            let t = day + chrono::Duration::minutes(minute);
            let h = solar_altitude(&GeoTime::new(0.0, 0.0, t).unwrap())
                .unwrap()
                .hour_angle_deg
                .abs();
            if h < best {
                best = h;
                noon = t;
            }
        }
        for dh in [1, 2, 3] {
            let plus = solar_altitude(
                &GeoTime::new(0.0, 0.0, noon + chrono::Duration::hours(dh)).unwrap(),
            )
            .unwrap()
            .altitude_deg;
            let minus = solar_altitude(
                &GeoTime::new(0.0, 0.0, noon - chrono::Duration::hours(dh)).unwrap(),
            )
            .unwrap()
            .altitude_deg;
            assert!((plus - minus).abs() < 0.3, "asymmetry at ±{dh}h: {plus} vs {minus}");
        }
    }

    #[test]
    fn altitude_climbs_monotonically_from_dawn_to_noon() {
        // 10-minute sampling from astronomical dawn to culmination.
        let day = utc(2024, 3, 15, 0, 0, 0);
        let alts: Vec<f64> = (0..144)
            .map(|i| {
                let t = day + chrono::Duration::minutes(10 * i);
                solar_altitude(&GeoTime::new(48.137, 11.575, t).unwrap())
                    .unwrap()
                    .altitude_deg
            })
            .collect();
        let noon = alts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let dawn = alts[..noon]
            .iter()
            .position(|&a| a > -18.0)
            .expect("dawn before noon");
        for i in dawn..noon {
            assert!(
                alts[i + 1] > alts[i],
                "not increasing at sample {i}: {} -> {}",
                alts[i],
                alts[i + 1]
            );
        }
    }

    #[test]
    fn refraction_correction_is_small_and_positive() {
        assert!((bennett_refraction_deg(0.0) - 0.574).abs() < 0.01);
        assert!(bennett_refraction_deg(45.0) < 0.02);
        assert_eq!(bennett_refraction_deg(-5.0), 0.0);
        let gt = GeoTime::new(48.137, 11.575, utc(2024, 6, 20, 4, 0, 0)).unwrap();
        let geo = solar_altitude(&gt).unwrap().altitude_deg;
        let app = solar_altitude_refracted(&gt).unwrap().altitude_deg;
        assert!(app >= geo);
        assert!(app - geo < 0.6);
    }

    #[test]
    fn geo_time_rejects_bad_coordinates() {
        let t = utc(2024, 1, 1, 0, 0, 0);
        assert!(GeoTime::new(95.0, 0.0, t).is_err());
        assert!(GeoTime::new(-95.0, 0.0, t).is_err());
        assert!(GeoTime::new(0.0, 181.0, t).is_err());
        assert!(GeoTime::new(f64::NAN, 0.0, t).is_err());
        assert!(GeoTime::new(90.0, -180.0, t).is_ok());
    }

    #[test]
    fn label_batch_contract() {
        let empty = label_batch(Vec::new(), false).unwrap();
        assert!(empty.labeled.is_empty() && empty.errors.is_empty());

        let rec = GeoSample {
            lat: 48.137,
            lon: 11.575,
            utc: "2024-06-20T12:00:00Z".into(),
            tags: None,
            altitude_deg: None,
            image: None,
        };
        let one = label_batch(vec![rec.clone()], false).unwrap();
        let direct = solar_altitude(&rec.geo_time().unwrap()).unwrap().altitude_deg;
        assert_eq!(one.labeled[0].altitude_deg, Some(round4(direct)));

        // Re-labeling recomputes rather than trusting a stale value.
        let mut stale = rec.clone();
        stale.altitude_deg = Some(-55.0);
        let relabeled = label_batch(vec![stale], false).unwrap();
        assert_eq!(relabeled.labeled[0].altitude_deg, Some(round4(direct)));

        let mut bad = rec.clone();
        bad.lat = 95.0;
        let batch = vec![rec.clone(), bad.clone(), rec.clone()];

        let lenient = label_batch(batch.clone(), false).unwrap();
        assert_eq!(lenient.labeled.len(), 2);
        assert_eq!(lenient.errors.len(), 1);
        assert_eq!(lenient.errors[0].index, 1);
        assert!(lenient.errors[0].message.contains("95"));

        let strict = label_batch(batch, true).unwrap_err();
        match strict {
            Error::Record { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let text = concat!(
            "{\"lat\": 48.137, \"lon\": 11.575, \"utc\": \"2024-06-20T12:00:00Z\"}\n",
            "\n",
            "{\"lat\": 0.0, \"lon\": 0.0, \"utc\": \"2020-01-01T00:00:00Z\", \"tags\": [\"Rain\"]}\n",
        );
        let recs = read_jsonl(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[1].has_tag("rain"));
        assert!(!recs[0].has_tag("rain"));

        let labeled = label_batch(recs, true).unwrap().labeled;
        let out = write_jsonl(&labeled);
        for line in out.lines() {
            assert!(line.contains("\"altitude_deg\":"));
        }
        let back = read_jsonl(&out).unwrap();
        assert_eq!(back, labeled);
    }

    #[test]
    fn jsonl_parse_error_carries_line_number() {
        let text = "{\"lat\": 1.0, \"lon\": 2.0, \"utc\": \"2020-01-01T00:00:00Z\"}\nnot json\n";
        match read_jsonl(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
