//! Cubic lattice geometry: site enumeration, nearest-neighbour edges,
//! boundary conditions.
//!
//! Sites of the `L × L × L` cube are indexed row-major with `x` fastest:
//! `index = x + L * (y + L * z)`. Edge indices are assigned by scanning
//! sites in index order and emitting the `+x`, `+y`, `+z` bonds of each
//! site, so the indexing is dense, deterministic, and stable for a given
//! `(L, bc)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spatial boundary condition. The vertical (time) direction is always
/// periodic and is not configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Periodic,
    Free,
}

impl fmt::Display for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryCondition::Periodic => write!(f, "periodic"),
            BoundaryCondition::Free => write!(f, "free"),
        }
    }
}

impl FromStr for BoundaryCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic" => Ok(BoundaryCondition::Periodic),
            "free" => Ok(BoundaryCondition::Free),
            other => Err(format!("unknown boundary condition `{other}` (expected `periodic` or `free`)")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("lattice side must be at least 1")]
    ZeroSide,
    /// At `L ≤ 2` the wrap-around bond coincides with the direct bond.
    #[error("periodic boundaries require side >= 3, got {0}")]
    PeriodicSideTooSmall(usize),
    #[error("site index {site} out of range (lattice has {sites} sites)")]
    SiteOutOfRange { site: usize, sites: usize },
}

/// The `L³` cubic lattice with its nearest-neighbour edge set.
///
/// Immutable after construction; shared read-only across workers.
#[derive(Debug, Clone)]
pub struct Lattice {
    side: usize,
    bc: BoundaryCondition,
    edges: Vec<(u32, u32)>,
    /// CSR adjacency: `adj[adj_offsets[s]..adj_offsets[s+1]]` lists the
    /// `(edge index, neighbour site)` pairs incident to site `s`, ordered
    /// by edge index.
    adj_offsets: Vec<u32>,
    adj: Vec<(u32, u32)>,
}

impl Lattice {
    pub fn new(side: usize, bc: BoundaryCondition) -> Result<Self, LatticeError> {
        if side == 0 {
            return Err(LatticeError::ZeroSide);
        }
        if bc == BoundaryCondition::Periodic && side < 3 {
            return Err(LatticeError::PeriodicSideTooSmall(side));
        }
        let sites = side * side * side;
        let mut edges = Vec::with_capacity(3 * sites);
        for s in 0..sites {
            let (x, y, z) = coords(s, side);
            for (cx, cy, cz) in [(x + 1, y, z), (x, y + 1, z), (x, y, z + 1)] {
                let nbr = match bc {
                    BoundaryCondition::Periodic => {
                        index(cx % side, cy % side, cz % side, side)
                    }
                    BoundaryCondition::Free => {
                        if cx >= side || cy >= side || cz >= side {
                            continue;
                        }
                        index(cx, cy, cz, side)
                    }
                };
                edges.push((s as u32, nbr as u32));
            }
        }

        let mut degree = vec![0u32; sites];
        for &(a, b) in &edges {
            degree[a as usize] += 1;
            degree[b as usize] += 1;
        }
        let mut adj_offsets = Vec::with_capacity(sites + 1);
        let mut acc = 0u32;
        adj_offsets.push(0);
        for d in &degree {
            acc += d;
            adj_offsets.push(acc);
        }
        let mut cursor: Vec<u32> = adj_offsets[..sites].to_vec();
        let mut adj = vec![(0u32, 0u32); edges.len() * 2];
        for (e, &(a, b)) in edges.iter().enumerate() {
            adj[cursor[a as usize] as usize] = (e as u32, b);
            cursor[a as usize] += 1;
            adj[cursor[b as usize] as usize] = (e as u32, a);
            cursor[b as usize] += 1;
        }

        Ok(Lattice { side, bc, edges, adj_offsets, adj })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    /// |Λ| = L³
    pub fn site_count(&self) -> usize {
        self.side * self.side * self.side
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn site_index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.side && y < self.side && z < self.side);
        index(x, y, z, self.side)
    }

    pub fn site_coords(&self, site: usize) -> (usize, usize, usize) {
        coords(site, self.side)
    }

    pub fn edge_endpoints(&self, edge: usize) -> (usize, usize) {
        let (a, b) = self.edges[edge];
        (a as usize, b as usize)
    }

    /// Incident `(edge index, neighbour site)` pairs of `site`, in a
    /// deterministic order. Length equals the site's degree.
    pub fn incident_edges(&self, site: usize) -> Result<&[(u32, u32)], LatticeError> {
        if site >= self.site_count() {
            return Err(LatticeError::SiteOutOfRange { site, sites: self.site_count() });
        }
        let lo = self.adj_offsets[site] as usize;
        let hi = self.adj_offsets[site + 1] as usize;
        Ok(&self.adj[lo..hi])
    }

    pub fn degree(&self, site: usize) -> Result<usize, LatticeError> {
        self.incident_edges(site).map(|v| v.len())
    }

    /// The edge joining `a` and `b`, if they are nearest neighbours.
    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        let lo = self.adj_offsets[a] as usize;
        let hi = self.adj_offsets[a + 1] as usize;
        self.adj[lo..hi]
            .iter()
            .find(|&&(_, nbr)| nbr as usize == b)
            .map(|&(e, _)| e as usize)
    }
}

#[inline]
fn index(x: usize, y: usize, z: usize, side: usize) -> usize {
    x + side * (y + side * z)
}

#[inline]
fn coords(site: usize, side: usize) -> (usize, usize, usize) {
    (site % side, (site / side) % side, site / (side * side))
}
