//! Cellular scenarios: base stations, user groups, pathloss and cooperation
//! clusters, and their reduction to per-cluster noise-normalized problems.

mod layout;
mod pathloss;
mod symmetry;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g12;

pub use layout::{
    build_hex7_scenario, build_hex7_scenario_with_grid, build_linear_scenario, HexCooperation,
    LinearCooperation, DEFAULT_POWER_PER_BS, HEX7_DEFAULT_GRID,
};
pub use pathloss::{pathloss_gain, wrap_degrees, AntennaPattern, PathlossModel};
pub use symmetry::{detect_symmetric_blocks, DEFAULT_SYMMETRY_TOLERANCE};

/// A 2-D position in kilometres.
pub type Point = [f64; 2];

/// One cooperation cluster: the base stations acting jointly and the user
/// groups they serve (global indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub bs: Vec<usize>,
    pub groups: Vec<usize>,
}

/// Matrix of amplitude gains `alpha[m][k]` from base station `m` to group `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    n_bs: usize,
    n_groups: usize,
    alpha: Vec<f64>,
}

impl GainMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_bs = rows.len();
        let n_groups = rows.first().map_or(0, Vec::len);
        if n_bs == 0 || n_groups == 0 {
            return Err(Error::Scenario("gain matrix must be non-empty".into()));
        }
        if rows.iter().any(|r| r.len() != n_groups) {
            return Err(Error::Scenario("gain matrix rows differ in length".into()));
        }
        let alpha: Vec<f64> = rows.iter().flatten().copied().collect();
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Scenario(
                "gain matrix entries must be finite and non-negative".into(),
            ));
        }
        Ok(GainMatrix {
            n_bs,
            n_groups,
            alpha,
        })
    }

    pub fn n_bs(&self) -> usize {
        self.n_bs
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.alpha[m * self.n_groups + k]
    }

    /// Dumps the matrix as `m,k,alpha` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "m,k,alpha")?;
        for m in 0..self.n_bs {
            for k in 0..self.n_groups {
                writeln!(out, "{m},{k},{}", g12(self.get(m, k)))?;
            }
        }
        Ok(())
    }
}

/// A full multi-cell scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub bs_positions: Vec<Point>,
    /// Boresight angle of each base station in degrees.
    pub bs_orientations: Vec<f64>,
    pub group_positions: Vec<Point>,
    /// Antennas per base station divided by users per group.
    pub gamma: f64,
    pub bs_powers: Vec<f64>,
    pub clusters: Vec<Cluster>,
    pub pathloss: PathlossModel,
    /// Torus lattice vectors; distances are taken over the nearest image.
    pub wraparound: Option<[Point; 2]>,
    /// Raw gains overriding the geometric model.
    pub explicit_gains: Option<GainMatrix>,
}

impl Scenario {
    /// Scenario given directly by an amplitude-gain matrix.
    pub fn explicit(
        alpha: GainMatrix,
        gamma: f64,
        bs_powers: Vec<f64>,
        clusters: Vec<Cluster>,
    ) -> Result<Self> {
        let s = Scenario {
            bs_positions: Vec::new(),
            bs_orientations: Vec::new(),
            group_positions: Vec::new(),
            gamma,
            bs_powers,
            clusters,
            pathloss: PathlossModel::default(),
            wraparound: None,
            explicit_gains: Some(alpha),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_bs(&self) -> usize {
        self.bs_powers.len()
    }

    pub fn n_groups(&self) -> usize {
        match &self.explicit_gains {
            Some(g) => g.n_groups(),
            None => self.group_positions.len(),
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Checks the partition and parameter invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_bs();
        let k = self.n_groups();
        if m == 0 || k == 0 {
            return Err(Error::Scenario("need at least one BS and one group".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Scenario("gamma must be positive".into()));
        }
        if self.bs_powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Scenario("every BS power must be positive".into()));
        }
        match &self.explicit_gains {
            Some(g) => {
                if g.n_bs() != m {
                    return Err(Error::Scenario(format!(
                        "gain matrix has {} rows but {} BS powers were given",
                        g.n_bs(),
                        m
                    )));
                }
            }
            None => {
                if self.bs_positions.len() != m || self.bs_orientations.len() != m {
                    return Err(Error::Scenario(
                        "BS positions, orientations and powers differ in length".into(),
                    ));
                }
                self.pathloss.validate()?;
            }
        }
        check_partition(self.clusters.iter().map(|c| &c.bs), m, "BS")?;
        check_partition(self.clusters.iter().map(|c| &c.groups), k, "group")?;
        if self
            .clusters
            .iter()
            .any(|c| c.bs.is_empty() || c.groups.is_empty())
        {
            return Err(Error::Scenario(
                "every cluster needs at least one BS and one group".into(),
            ));
        }
        Ok(())
    }

    /// Displacement from `from` to the nearest torus image of `to`.
    fn displacements(&self, from: Point, to: Point) -> Vec<Point> {
        let d = [to[0] - from[0], to[1] - from[1]];
        match self.wraparound {
            None => vec![d],
            Some([t1, t2]) => {
                let mut out = Vec::with_capacity(25);
                for i in -2i32..=2 {
                    for j in -2i32..=2 {
                        let (i, j) = (i as f64, j as f64);
                        out.push([d[0] + i * t1[0] + j * t2[0], d[1] + i * t1[1] + j * t2[1]]);
                    }
                }
                out
            }
        }
    }

    /// Distance over the nearest torus image (plain distance without wraparound).
    pub fn wrapped_distance(&self, from: Point, to: Point) -> f64 {
        self.displacements(from, to)
            .into_iter()
            .map(|d| d[0].hypot(d[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Amplitude gains of all (BS, group) pairs.
    ///
    /// With wraparound the nearest image is used; images at the same distance
    /// (to 1e-9 relative) are resolved towards the larger antenna gain.
    pub fn gains(&self) -> Result<GainMatrix> {
        if let Some(g) = &self.explicit_gains {
            return Ok(g.clone());
        }
        let (nm, nk) = (self.n_bs(), self.n_groups());
        let mut alpha = vec![0.0; nm * nk];
        for m in 0..nm {
            let bs = self.bs_positions[m];
            for k in 0..nk {
                let mut best: Option<(f64, f64)> = None;
                for d in self.displacements(bs, self.group_positions[k]) {
                    let dist = d[0].hypot(d[1]);
                    let angle = if dist > 0.0 {
                        d[1].atan2(d[0]).to_degrees() - self.bs_orientations[m]
                    } else {
                        0.0
                    };
                    let gain = self.pathloss.gain(dist, angle)?;
                    best = match best {
                        None => Some((dist, gain)),
                        Some((bd, bg)) => {
                            let tie = (dist - bd).abs() <= 1e-9 * bd.max(dist);
                            if (tie && gain > bg) || (!tie && dist < bd) {
                                Some((dist, gain))
                            } else {
                                Some((bd, bg))
                            }
                        }
                    };
                }
                alpha[m * nk + k] = best.expect("at least one image").1;
            }
        }
        Ok(GainMatrix {
            n_bs: nm,
            n_groups: nk,
            alpha,
        })
    }

    pub fn cluster_of_group(&self, group: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.groups.contains(&group))
    }
}

fn check_partition<'a>(
    sets: impl Iterator<Item = &'a Vec<usize>>,
    n: usize,
    what: &str,
) -> Result<()> {
    let mut seen = vec![false; n];
    for set in sets {
        for &i in set {
            if i >= n {
                return Err(Error::Scenario(format!("{what} index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Scenario(format!(
                    "{what} {i} belongs to more than one cluster"
                )));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Scenario(format!("{what} {i} is in no cluster")));
    }
    Ok(())
}

/// ICI-plus-noise variance `1 + Σ_{m ∉ cluster} α²_{m,k} P_m` seen by `group`.
pub fn ici_noise(
    scenario: &Scenario,
    gains: &GainMatrix,
    cluster_index: usize,
    group_index: usize,
) -> Result<f64> {
    let cluster = scenario
        .clusters
        .get(cluster_index)
        .ok_or_else(|| Error::invalid(format!("no cluster {cluster_index}")))?;
    if !cluster.groups.contains(&group_index) {
        return Err(Error::invalid(format!(
            "group {group_index} is not in cluster {cluster_index}"
        )));
    }
    let mut sigma2 = 1.0;
    for m in 0..scenario.n_bs() {
        if !cluster.bs.contains(&m) {
            let a = gains.get(m, group_index);
            sigma2 += a * a * scenario.bs_powers[m];
        }
    }
    Ok(sigma2)
}

/// Per-cluster optimization instance with gains normalized by ICI plus noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProblem {
    gamma: f64,
    n_bs: usize,
    n_groups: usize,
    /// Row-major `n_bs × n_groups`.
    beta: Vec<f64>,
    bs_powers: Vec<f64>,
    /// Global index of each local BS.
    pub bs_labels: Vec<usize>,
    /// Global index of each local group.
    pub group_labels: Vec<usize>,
}

impl ClusterProblem {
    /// Builds a problem directly from effective gains `beta[m][k]`.
    pub fn new(gamma: f64, beta: &[Vec<f64>], bs_powers: Vec<f64>) -> Result<Self> {
        let n_bs = beta.len();
        let n_groups = beta.first().map_or(0, Vec::len);
        if n_bs == 0 || n_groups == 0 {
            return Err(Error::invalid("cluster needs B >= 1 and A >= 1"));
        }
        if beta.iter().any(|r| r.len() != n_groups) {
            return Err(Error::invalid("beta rows differ in length"));
        }
        if bs_powers.len() != n_bs {
            return Err(Error::invalid("one power per BS is required"));
        }
        let flat: Vec<f64> = beta.iter().flatten().copied().collect();
        if flat.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid(
                "beta entries must be finite and non-negative",
            ));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if bs_powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("BS powers must be positive"));
        }
        Ok(ClusterProblem {
            gamma,
            n_bs,
            n_groups,
            beta: flat,
            bs_powers,
            bs_labels: (0..n_bs).collect(),
            group_labels: (0..n_groups).collect(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of base stations `B`.
    pub fn n_bs(&self) -> usize {
        self.n_bs
    }

    /// Number of user groups `A`.
    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    #[inline]
    pub fn beta(&self, m: usize, k: usize) -> f64 {
        self.beta[m * self.n_groups + k]
    }

    pub fn bs_powers(&self) -> &[f64] {
        &self.bs_powers
    }

    /// Copy with groups reordered: local group `i` of the result is group
    /// `order[i]` of `self`.
    pub fn permute_groups(&self, order: &[usize]) -> ClusterProblem {
        assert_eq!(order.len(), self.n_groups);
        let mut beta = Vec::with_capacity(self.beta.len());
        for m in 0..self.n_bs {
            beta.extend(order.iter().map(|&k| self.beta(m, k)));
        }
        ClusterProblem {
            beta,
            group_labels: order.iter().map(|&k| self.group_labels[k]).collect(),
            ..self.clone()
        }
    }

    /// Dumps effective gains as `m,k,beta` rows (global indices).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "m,k,beta")?;
        for m in 0..self.n_bs {
            for k in 0..self.n_groups {
                writeln!(
                    out,
                    "{},{},{}",
                    self.bs_labels[m],
                    self.group_labels[k],
                    g12(self.beta(m, k))
                )?;
            }
        }
        Ok(())
    }
}

/// Reduces cluster `cluster_index` of `scenario` to its effective gains
/// `β = α/σ`.
pub fn cluster_problem(
    scenario: &Scenario,
    gains: &GainMatrix,
    cluster_index: usize,
) -> Result<ClusterProblem> {
    let cluster = scenario
        .clusters
        .get(cluster_index)
        .ok_or_else(|| Error::invalid(format!("no cluster {cluster_index}")))?;
    let sigmas = cluster
        .groups
        .iter()
        .map(|&k| ici_noise(scenario, gains, cluster_index, k).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;
    let beta: Vec<Vec<f64>> = cluster
        .bs
        .iter()
        .map(|&m| {
            cluster
                .groups
                .iter()
                .zip(&sigmas)
                .map(|(&k, s)| gains.get(m, k) / s)
                .collect()
        })
        .collect();
    let powers = cluster.bs.iter().map(|&m| scenario.bs_powers[m]).collect();
    let mut p = ClusterProblem::new(scenario.gamma, &beta, powers)?;
    p.bs_labels = cluster.bs.clone();
    p.group_labels = cluster.groups.clone();
    Ok(p)
}
