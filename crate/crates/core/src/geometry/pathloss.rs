use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizontal antenna pattern of a base station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AntennaPattern {
    Omni,
    /// Parabolic sector pattern `min(12 (θ/θ3dB)², front_to_back)` in dB.
    Sector {
        front_to_back_db: f64,
        beamwidth_3db_deg: f64,
    },
}

impl AntennaPattern {
    pub fn default_sector() -> Self {
        AntennaPattern::Sector {
            front_to_back_db: 25.0,
            beamwidth_3db_deg: 70.0,
        }
    }

    /// Attenuation in dB at `angle_deg` off boresight.
    pub fn attenuation_db(&self, angle_deg: f64) -> f64 {
        match *self {
            AntennaPattern::Omni => 0.0,
            AntennaPattern::Sector {
                front_to_back_db,
                beamwidth_3db_deg,
            } => {
                let theta = wrap_degrees(angle_deg);
                (12.0 * (theta / beamwidth_3db_deg).powi(2)).min(front_to_back_db)
            }
        }
    }
}

/// Log-distance pathloss with an optional sector pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathlossModel {
    pub fixed_offset_db: f64,
    pub exponent_coeff_db_per_decade: f64,
    pub reference_distance_km: f64,
    /// Distances below this are clamped to it.
    pub min_distance_km: f64,
    pub antenna_pattern: AntennaPattern,
}

impl Default for PathlossModel {
    fn default() -> Self {
        PathlossModel {
            fixed_offset_db: 130.19,
            exponent_coeff_db_per_decade: 37.6,
            reference_distance_km: 1.0,
            min_distance_km: 0.036,
            antenna_pattern: AntennaPattern::Omni,
        }
    }
}

impl PathlossModel {
    pub fn with_pattern(mut self, pattern: AntennaPattern) -> Self {
        self.antenna_pattern = pattern;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.fixed_offset_db,
            self.exponent_coeff_db_per_decade,
            self.reference_distance_km,
            self.min_distance_km,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("pathloss parameters must be finite"));
        }
        if self.reference_distance_km <= 0.0 || self.min_distance_km <= 0.0 {
            return Err(Error::invalid(
                "pathloss reference and minimum distances must be positive",
            ));
        }
        if let AntennaPattern::Sector {
            front_to_back_db,
            beamwidth_3db_deg,
        } = self.antenna_pattern
        {
            if !(front_to_back_db.is_finite() && front_to_back_db >= 0.0)
                || !(beamwidth_3db_deg.is_finite() && beamwidth_3db_deg > 0.0)
            {
                return Err(Error::invalid(
                    "sector pattern needs front_to_back_db >= 0 and beamwidth_3db_deg > 0",
                ));
            }
        }
        Ok(())
    }

    /// Pathloss in dB (without antenna pattern) at `distance_km`.
    pub fn loss_db(&self, distance_km: f64) -> f64 {
        let d = distance_km.max(self.min_distance_km);
        self.fixed_offset_db
            + self.exponent_coeff_db_per_decade * (d / self.reference_distance_km).log10()
    }

    /// Linear amplitude gain `10^(-(L + A)/20)`.
    pub fn gain(&self, distance_km: f64, angle_off_boresight_deg: f64) -> Result<f64> {
        pathloss_gain(self, distance_km, angle_off_boresight_deg)
    }
}

/// Linear amplitude gain of `model` at a distance and angle off boresight.
pub fn pathloss_gain(
    model: &PathlossModel,
    distance_km: f64,
    angle_off_boresight_deg: f64,
) -> Result<f64> {
    if !distance_km.is_finite() || !angle_off_boresight_deg.is_finite() {
        return Err(Error::invalid("pathloss inputs must be finite"));
    }
    // Zero distance (co-located points) is clamped like any other short distance.
    if distance_km < 0.0 {
        return Err(Error::invalid("distance must be non-negative"));
    }
    let total_db = model.loss_db(distance_km)
        + model
            .antenna_pattern
            .attenuation_db(angle_off_boresight_deg);
    Ok(10f64.powf(-total_db / 20.0))
}

/// Wraps an angle into `(-180, 180]` degrees.
pub fn wrap_degrees(angle: f64) -> f64 {
    let mut a = angle % 360.0;
    if a > 180.0 {
        a -= 360.0;
    } else if a <= -180.0 {
        a += 360.0;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_distance_leaves_offset_only() {
        let m = PathlossModel::default();
        let g = pathloss_gain(&m, 1.0, 0.0).unwrap();
        assert!((g - 10f64.powf(-130.19 / 20.0)).abs() <= 1e-15 * g);
    }

    #[test]
    fn one_decade_drops_by_slope() {
        let m = PathlossModel::default();
        let near = pathloss_gain(&m, 0.5, 0.0).unwrap();
        let far = pathloss_gain(&m, 5.0, 0.0).unwrap();
        let drop_db = 20.0 * (near / far).log10();
        assert!((drop_db - 37.6).abs() < 1e-9, "{drop_db}");
    }

    #[test]
    fn sector_boresight_matches_omni() {
        let omni = PathlossModel::default();
        let sector = omni.with_pattern(AntennaPattern::default_sector());
        assert_eq!(
            pathloss_gain(&omni, 0.7, 0.0).unwrap(),
            pathloss_gain(&sector, 0.7, 0.0).unwrap()
        );
        // Back lobe is floored at the front-to-back ratio.
        let back = pathloss_gain(&sector, 0.7, 180.0).unwrap();
        let front = pathloss_gain(&sector, 0.7, 0.0).unwrap();
        assert!((20.0 * (front / back).log10() - 25.0).abs() < 1e-9);
        // 3 dB point.
        let edge = pathloss_gain(&sector, 0.7, -35.0).unwrap();
        assert!((20.0 * (front / edge).log10() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn short_distances_are_clamped() {
        let m = PathlossModel::default();
        let at_min = pathloss_gain(&m, m.min_distance_km, 0.0).unwrap();
        assert_eq!(pathloss_gain(&m, 1e-6, 0.0).unwrap(), at_min);
        assert_eq!(pathloss_gain(&m, 0.0, 0.0).unwrap(), at_min);
    }

    #[test]
    fn rejects_nonfinite() {
        let m = PathlossModel::default();
        assert!(pathloss_gain(&m, f64::NAN, 0.0).is_err());
        assert!(pathloss_gain(&m, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_is_in_range() {
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(540.0), 180.0);
        assert_eq!(wrap_degrees(-30.0), -30.0);
    }
}
