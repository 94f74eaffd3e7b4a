use serde::{Deserialize, Serialize};

use super::{AntennaPattern, Cluster, PathlossModel, Point, Scenario};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearCooperation {
    None,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HexCooperation {
    None,
    Sector,
    Full,
}

/// Per-BS transmit power relative to the receiver noise: `10^14.5`, which
/// puts the cell-edge SNR at 1 km near 15 dB under the default pathloss.
pub const DEFAULT_POWER_PER_BS: f64 = 3.162_277_660_168_379_5e14;

/// Rhombus coordinates of the four grid centres inside a sector.
pub const HEX7_DEFAULT_GRID: [f64; 2] = [0.25, 0.75];

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Two inward-facing base stations at `±cell_radius_km` with `n_groups`
/// groups equally spaced strictly between them.
pub fn build_linear_scenario(
    n_groups: usize,
    cell_radius_km: f64,
    gamma: f64,
    power_per_bs: f64,
    cooperation: LinearCooperation,
) -> Result<Scenario> {
    if n_groups < 2 {
        return Err(Error::invalid("linear layout needs at least 2 groups"));
    }
    if cooperation == LinearCooperation::None && n_groups % 2 != 0 {
        return Err(Error::invalid(
            "an odd number of groups cannot be split evenly between two cells",
        ));
    }
    check_positive("cell radius", cell_radius_km)?;
    check_positive("gamma", gamma)?;
    check_positive("power per BS", power_per_bs)?;

    let r = cell_radius_km;
    let spacing = 2.0 * r / (n_groups as f64 + 1.0);
    let group_positions: Vec<Point> = (1..=n_groups)
        .map(|i| [-r + spacing * i as f64, 0.0])
        .collect();
    let all: Vec<usize> = (0..n_groups).collect();
    let clusters = match cooperation {
        LinearCooperation::Full => vec![Cluster {
            bs: vec![0, 1],
            groups: all,
        }],
        LinearCooperation::None => {
            let half = n_groups / 2;
            vec![
                Cluster {
                    bs: vec![0],
                    groups: all[..half].to_vec(),
                },
                Cluster {
                    bs: vec![1],
                    groups: all[half..].to_vec(),
                },
            ]
        }
    };
    let s = Scenario {
        bs_positions: vec![[-r, 0.0], [r, 0.0]],
        bs_orientations: vec![0.0, 180.0],
        group_positions,
        gamma,
        bs_powers: vec![power_per_bs; 2],
        clusters,
        pathloss: PathlossModel::default(),
        wraparound: None,
        explicit_gains: None,
    };
    s.validate()?;
    Ok(s)
}

fn dir(deg: f64) -> Point {
    let r = deg.to_radians();
    [r.cos(), r.sin()]
}

/// Seven hexagonal three-sector cells on a wrap-around torus: 21 BSs and 84
/// groups (four per sector).
pub fn build_hex7_scenario(
    cell_radius_km: f64,
    gamma: f64,
    power_per_bs: f64,
    cooperation: HexCooperation,
) -> Result<Scenario> {
    build_hex7_scenario_with_grid(
        cell_radius_km,
        gamma,
        power_per_bs,
        cooperation,
        HEX7_DEFAULT_GRID,
    )
}

/// As [`build_hex7_scenario`], with the grid centres placed at rhombus
/// coordinates `grid × grid` of each sector.
pub fn build_hex7_scenario_with_grid(
    cell_radius_km: f64,
    gamma: f64,
    power_per_bs: f64,
    cooperation: HexCooperation,
    grid: [f64; 2],
) -> Result<Scenario> {
    check_positive("cell radius", cell_radius_km)?;
    check_positive("gamma", gamma)?;
    check_positive("power per BS", power_per_bs)?;
    if grid
        .iter()
        .any(|f| !(f.is_finite() && *f > 0.0 && *f < 1.0))
    {
        return Err(Error::invalid("grid coordinates must lie in (0, 1)"));
    }

    let r = cell_radius_km;
    let isd = 3f64.sqrt() * r;
    // Hex lattice basis (60° apart) and the 7-cell torus super-lattice.
    let a = dir(30.0).map(|c| c * isd);
    let b = dir(90.0).map(|c| c * isd);
    let t1 = [2.0 * a[0] + b[0], 2.0 * a[1] + b[1]];
    let t2 = [-a[0] + 3.0 * b[0], -a[1] + 3.0 * b[1]];

    let mut centers: Vec<Point> = vec![[0.0, 0.0]];
    centers.extend((0..6).map(|i| dir(30.0 + 60.0 * i as f64).map(|c| c * isd)));

    let mut bs_positions = Vec::with_capacity(21);
    let mut bs_orientations = Vec::with_capacity(21);
    let mut group_positions = Vec::with_capacity(84);
    for c in &centers {
        for s in 0..3 {
            let start = 120.0 * s as f64;
            bs_positions.push(*c);
            bs_orientations.push(start + 60.0);
            // Sector rhombus spanned by two hexagon vertices 120° apart.
            let e1 = dir(start).map(|v| v * r);
            let e2 = dir(start + 120.0).map(|v| v * r);
            for &u in &grid {
                for &v in &grid {
                    group_positions
                        .push([c[0] + u * e1[0] + v * e2[0], c[1] + u * e1[1] + v * e2[1]]);
                }
            }
        }
    }

    let clusters = match cooperation {
        HexCooperation::None => (0..21)
            .map(|m| Cluster {
                bs: vec![m],
                groups: (4 * m..4 * m + 4).collect(),
            })
            .collect(),
        HexCooperation::Sector => (0..7)
            .map(|c| Cluster {
                bs: (3 * c..3 * c + 3).collect(),
                groups: (12 * c..12 * c + 12).collect(),
            })
            .collect(),
        HexCooperation::Full => vec![Cluster {
            bs: (0..21).collect(),
            groups: (0..84).collect(),
        }],
    };

    let s = Scenario {
        bs_positions,
        bs_orientations,
        group_positions,
        gamma,
        bs_powers: vec![power_per_bs; 21],
        clusters,
        pathloss: PathlossModel::default().with_pattern(AntennaPattern::default_sector()),
        wraparound: Some([t1, t2]),
        explicit_gains: None,
    };
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_cluster_shapes() {
        let none = build_linear_scenario(8, 1.0, 4.0, 1e3, LinearCooperation::None).unwrap();
        assert_eq!(none.n_clusters(), 2);
        for c in &none.clusters {
            assert_eq!((c.bs.len(), c.groups.len()), (1, 4));
        }
        assert_eq!(none.clusters[0].groups, vec![0, 1, 2, 3]);
        assert_eq!(none.clusters[1].groups, vec![4, 5, 6, 7]);
        let full = build_linear_scenario(8, 1.0, 4.0, 1e3, LinearCooperation::Full).unwrap();
        assert_eq!(full.n_clusters(), 1);
        assert_eq!(
            (full.clusters[0].bs.len(), full.clusters[0].groups.len()),
            (2, 8)
        );
    }

    #[test]
    fn two_groups_sit_at_thirds() {
        let s = build_linear_scenario(2, 1.0, 1.0, 1.0, LinearCooperation::Full).unwrap();
        assert!((s.group_positions[0][0] + 1.0 / 3.0).abs() < 1e-15);
        assert!((s.group_positions[1][0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.bs_positions, vec![[-1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn linear_rejects_bad_counts() {
        assert!(build_linear_scenario(1, 1.0, 1.0, 1.0, LinearCooperation::Full).is_err());
        assert!(build_linear_scenario(5, 1.0, 1.0, 1.0, LinearCooperation::None).is_err());
        assert!(build_linear_scenario(5, 1.0, 1.0, 1.0, LinearCooperation::Full).is_ok());
        assert!(build_linear_scenario(4, 0.0, 1.0, 1.0, LinearCooperation::Full).is_err());
    }

    #[test]
    fn hex7_cluster_shapes() {
        for (coop, l, b, a) in [
            (HexCooperation::None, 21, 1, 4),
            (HexCooperation::Sector, 7, 3, 12),
            (HexCooperation::Full, 1, 21, 84),
        ] {
            let s = build_hex7_scenario(1.0, 4.0, 1.0, coop).unwrap();
            assert_eq!(s.n_bs(), 21);
            assert_eq!(s.n_groups(), 84);
            assert_eq!(s.n_clusters(), l);
            for c in &s.clusters {
                assert_eq!((c.bs.len(), c.groups.len()), (b, a));
            }
        }
    }

    #[test]
    fn hex7_groups_fall_inside_their_sector() {
        let s = build_hex7_scenario(1.0, 4.0, 1.0, HexCooperation::None).unwrap();
        for (k, g) in s.group_positions.iter().enumerate() {
            let m = k / 4;
            let c = s.bs_positions[m];
            let d = [g[0] - c[0], g[1] - c[1]];
            let off =
                super::super::wrap_degrees(d[1].atan2(d[0]).to_degrees() - s.bs_orientations[m]);
            assert!(off.abs() < 60.0, "group {k} is {off}° off boresight");
            assert!(d[0].hypot(d[1]) < 1.0);
        }
    }
}
