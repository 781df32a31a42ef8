//! Loop decomposition of a realisation.
//!
//! A trajectory moves vertically along a site's time circle `[0, β)` and
//! jumps to the neighbouring site at every event on an incident edge: a
//! cross keeps the vertical direction, a double bar reverses it. Time is
//! periodic, so every trajectory closes into a loop, and the loops
//! partition all `(site, time)` points.
//!
//! The traversal atom is a *leg*: the maximal vertical segment of one
//! site's circle between two consecutive events (the full circle when the
//! site has no events). A site with `k ≥ 1` events has `k` legs; leg `j`
//! runs upward from event `j` to event `j+1 (mod k)`, the last one
//! wrapping across the `β → 0` boundary. Each leg belongs to exactly one
//! loop and is traversed exactly once, in one direction, so the sweep is
//! O(#legs) overall and
//!
//! ```text
//!   Σ_j vertical_length_j = β |Λ|,      Σ_j shadow_count_j = |Λ|.
//! ```
//!
//! Shadow counting follows the `t = 0⁻` convention: a site is in a loop's
//! shadow iff the leg that wraps across the period boundary on its line
//! belongs to that loop.

use thiserror::Error;

use crate::realisation::{EventKind, Realisation};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    /// A leg was reached twice by different traversals; the timelines are
    /// corrupt.
    #[error("leg {0} visited twice during loop tracing; realisation timelines corrupt")]
    LegRevisited(usize),
    /// A traversal came back to its starting leg with the wrong direction.
    #[error("loop traversal failed to close onto its starting leg")]
    UnclosedLoop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopStats {
    /// Total time extent traversed by the loop, in time units.
    pub vertical_length: f64,
    /// Number of sites whose time-0 point lies on the loop.
    pub shadow_count: u32,
}

/// The loop decomposition of one realisation.
#[derive(Debug, Clone)]
pub struct LoopSet {
    loops: Vec<LoopStats>,
    /// Loop index owning each site's time-0⁻ point (its wrap leg).
    wrap_loop: Vec<u32>,
    beta: f64,
    site_count: usize,
    leg_count: usize,
}

impl LoopSet {
    pub fn loop_count(&self) -> usize {
        self.loops.len()
    }

    pub fn loops(&self) -> &[LoopStats] {
        &self.loops
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn site_count(&self) -> usize {
        self.site_count
    }

    /// Number of traversal atoms, `Σ_sites max(1, #events on the line)`.
    pub fn leg_count(&self) -> usize {
        self.leg_count
    }

    pub fn total_vertical_length(&self) -> f64 {
        self.loops.iter().map(|l| l.vertical_length).sum()
    }

    pub fn total_shadow_count(&self) -> usize {
        self.loops.iter().map(|l| l.shadow_count as usize).sum()
    }

    /// Index of the loop containing `(site, 0)`.
    pub fn wrap_loop_of(&self, site: usize) -> usize {
        self.wrap_loop[site] as usize
    }

    /// Whether `(x, 0)` and `(y, 0)` lie on the same loop.
    pub fn same_loop_at_time_zero(&self, x: usize, y: usize) -> bool {
        self.wrap_loop[x] == self.wrap_loop[y]
    }

    /// Shadow lengths `ℓ_1 ≥ ℓ_2 ≥ …` in decreasing order. Loops that
    /// avoid time 0 carry no shadow and are omitted; the sum is `|Λ|`.
    pub fn shadow_partition(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .loops
            .iter()
            .filter(|l| l.shadow_count > 0)
            .map(|l| l.shadow_count as usize)
            .collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Vertical lengths `L_1 ≥ L_2 ≥ …` of all loops (zero-shadow ones
    /// included) in decreasing order; the sum is `β |Λ|`.
    pub fn length_partition(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.loops.iter().map(|l| l.vertical_length).collect();
        out.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Up,
    Down,
}

impl Dir {
    fn flip(self) -> Dir {
        match self {
            Dir::Up => Dir::Down,
            Dir::Down => Dir::Up,
        }
    }
}

/// Decompose a realisation into loops.
pub fn trace_loops(r: &Realisation) -> Result<LoopSet, TraceError> {
    Tracer::new(r).run()
}

struct Tracer<'r, 'a> {
    r: &'r Realisation<'a>,
    /// Global leg id of site `s`'s leg 0 is `leg_offsets[s]`.
    leg_offsets: Vec<u32>,
    visited: Vec<bool>,
}

impl<'r, 'a> Tracer<'r, 'a> {
    fn new(r: &'r Realisation<'a>) -> Self {
        let sites = r.lattice().site_count();
        let mut leg_offsets = Vec::with_capacity(sites + 1);
        let mut acc = 0u32;
        leg_offsets.push(0);
        for s in 0..sites {
            acc += r.site_timeline(s).len().max(1) as u32;
            leg_offsets.push(acc);
        }
        let visited = vec![false; acc as usize];
        Tracer { r, leg_offsets, visited }
    }

    fn run(mut self) -> Result<LoopSet, TraceError> {
        let sites = self.r.lattice().site_count();
        let beta = self.r.beta();
        let mut loops = Vec::new();
        let mut wrap_loop = vec![u32::MAX; sites];

        for site in 0..sites {
            let k = self.r.site_timeline(site).len();
            if k == 0 {
                // An event-free line is a loop of its own.
                let gid = self.leg_offsets[site] as usize;
                if self.visited[gid] {
                    continue;
                }
                self.visited[gid] = true;
                wrap_loop[site] = loops.len() as u32;
                loops.push(LoopStats { vertical_length: beta, shadow_count: 1 });
                continue;
            }
            for leg in 0..k as u32 {
                let gid = (self.leg_offsets[site] + leg) as usize;
                if self.visited[gid] {
                    continue;
                }
                let loop_id = loops.len() as u32;
                let stats = self.trace_from(site as u32, leg, loop_id, &mut wrap_loop)?;
                loops.push(stats);
            }
        }

        debug_assert!(self.visited.iter().all(|&v| v));
        debug_assert!(wrap_loop.iter().all(|&l| l != u32::MAX));

        Ok(LoopSet {
            loops,
            wrap_loop,
            beta,
            site_count: sites,
            leg_count: self.visited.len(),
        })
    }

    /// Follow one loop starting upward on `(site, leg)`; `leg` must belong
    /// to a site with at least one event.
    fn trace_from(
        &mut self,
        site: u32,
        leg: u32,
        loop_id: u32,
        wrap_loop: &mut [u32],
    ) -> Result<LoopStats, TraceError> {
        let start = (site, leg);
        let mut cur = (site, leg, Dir::Up);
        let mut length = 0.0;
        let mut shadows = 0u32;
        loop {
            let (s, j, dir) = cur;
            let gid = (self.leg_offsets[s as usize] + j) as usize;
            if self.visited[gid] {
                return Err(TraceError::LegRevisited(gid));
            }
            self.visited[gid] = true;
            let k = self.r.site_timeline(s as usize).len() as u32;
            length += self.leg_length(s, j, k);
            if j == k - 1 {
                // The wrap leg holds the site's time-0⁻ point.
                shadows += 1;
                wrap_loop[s as usize] = loop_id;
            }
            cur = self.step(s, j, k, dir);
            if (cur.0, cur.1) == start {
                if cur.2 != Dir::Up {
                    return Err(TraceError::UnclosedLoop);
                }
                break;
            }
        }
        Ok(LoopStats { vertical_length: length, shadow_count: shadows })
    }

    fn leg_length(&self, site: u32, leg: u32, k: u32) -> f64 {
        let tl = self.r.site_timeline(site as usize);
        let t = |slot: u32| self.r.event(tl[slot as usize]).time;
        if leg + 1 < k {
            t(leg + 1) - t(leg)
        } else {
            self.r.beta() - t(k - 1) + t(0)
        }
    }

    /// One traversal step: ride the leg to its bounding event, jump across
    /// the edge, and land on the partner site's adjacent leg.
    fn step(&self, site: u32, leg: u32, k: u32, dir: Dir) -> (u32, u32, Dir) {
        let tl = self.r.site_timeline(site as usize);
        let ev_slot = match dir {
            Dir::Up => (leg + 1) % k,
            Dir::Down => leg,
        };
        let id = tl[ev_slot as usize];
        let ev = self.r.event(id);
        let (a, b) = self.r.lattice().edge_endpoints(ev.edge as usize);
        let (partner, side) = if site as usize == a { (b as u32, 1) } else { (a as u32, 0) };
        let slot = self.r.event_slot(id, side);
        let next_dir = match ev.kind {
            EventKind::Cross => dir,
            EventKind::Bar => dir.flip(),
        };
        let k2 = self.r.site_timeline(partner as usize).len() as u32;
        let next_leg = match next_dir {
            Dir::Up => slot,
            Dir::Down => (slot + k2 - 1) % k2,
        };
        (partner, next_leg, next_dir)
    }

    /// Legs reached from `(site, leg)` going up, in traversal order.
    /// Diagnostic used by the involution test.
    #[cfg(test)]
    fn cycle_legs(&self, site: u32, leg: u32) -> Vec<usize> {
        let start = (site, leg);
        let mut cur = (site, leg, Dir::Up);
        let mut legs = Vec::new();
        loop {
            let (s, j, dir) = cur;
            legs.push((self.leg_offsets[s as usize] + j) as usize);
            let k = self.r.site_timeline(s as usize).len() as u32;
            cur = self.step(s, j, k, dir);
            if (cur.0, cur.1) == start {
                break;
            }
        }
        legs
    }
}
