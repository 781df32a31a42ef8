//! Sampling of the marked Poisson point process of crosses and double bars
//! on `E_Λ × [0, β)`, and the per-site time-sorted timelines the loop
//! tracer walks.
//!
//! Each edge carries an independent Poisson process of total intensity 1
//! per unit time (crosses with intensity `u`, double bars with `1 - u`),
//! so the event count per edge is Poisson(β), times are i.i.d. uniform on
//! `[0, β)`, and each event is a cross with probability `u`.

use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::lattice::Lattice;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Jump to the neighbour, keep the vertical direction.
    Cross,
    /// Jump to the neighbour, reverse the vertical direction.
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub edge: u32,
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum RealisationError {
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("u must lie in [0, 1], got {0}")]
    InvalidU(f64),
    #[error("event time {time} outside [0, {beta})")]
    TimeOutOfRange { time: f64, beta: f64 },
    #[error("sites {0} and {1} are not nearest neighbours")]
    NotAnEdge(usize, usize),
    #[error("duplicate event time {time} on edge {edge}")]
    DuplicateTime { edge: usize, time: f64 },
    #[error("coincident event times {time} at site {site}")]
    TimelineTie { site: usize, time: f64 },
    #[error("malformed event record at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One sample ω of the marked Poisson processes on all edges.
///
/// Immutable after construction. Events are stored grouped by edge and
/// time-sorted within each edge; in addition every site carries the
/// time-sorted list of events on its incident edges, with cross-links so
/// the tracer can jump between the two endpoint timelines in O(1).
#[derive(Debug, Clone)]
pub struct Realisation<'a> {
    lattice: &'a Lattice,
    beta: f64,
    u: f64,
    /// All events, sorted by (edge, time).
    events: Vec<Event>,
    /// CSR offsets into `events` per edge.
    edge_offsets: Vec<u32>,
    /// CSR offsets into `timeline_events` per site.
    site_offsets: Vec<u32>,
    /// Event ids, time-sorted per site.
    timeline_events: Vec<u32>,
    /// For each event, its slot in the timeline of each edge endpoint
    /// (index 0 for the first endpoint of the edge, 1 for the second).
    event_slots: Vec<[u32; 2]>,
}

impl<'a> Realisation<'a> {
    /// Draw one realisation. Event times on one edge are strictly distinct;
    /// the measure-zero floating-point collisions (on an edge, or between
    /// edges at a shared site) are resolved by redrawing.
    pub fn sample(
        lattice: &'a Lattice,
        beta: f64,
        u: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, RealisationError> {
        validate_params(beta, u)?;
        let poisson =
            Poisson::new(beta).map_err(|_| RealisationError::NonPositiveBeta(beta))?;
        loop {
            let mut per_edge: Vec<Vec<(f64, EventKind)>> =
                Vec::with_capacity(lattice.edge_count());
            for _ in 0..lattice.edge_count() {
                let n = poisson.sample(rng) as usize;
                let mut evs: Vec<(f64, EventKind)> = Vec::with_capacity(n);
                loop {
                    evs.clear();
                    for _ in 0..n {
                        let t = rng.random_range(0.0..beta);
                        let kind = if rng.random::<f64>() < u {
                            EventKind::Cross
                        } else {
                            EventKind::Bar
                        };
                        evs.push((t, kind));
                    }
                    evs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    if evs.windows(2).all(|w| w[0].0 < w[1].0) {
                        break;
                    }
                }
                per_edge.push(evs);
            }
            match Self::build(lattice, beta, u, per_edge) {
                Ok(r) => return Ok(r),
                // Same-time events on distinct edges at one site: redraw.
                Err(RealisationError::TimelineTie { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Build a realisation from explicit events given as
    /// `(site_a, site_b, time, kind)` records. Rejects pairs that are not
    /// edges, times outside `[0, β)`, and coincident times at a site.
    pub fn from_events(
        lattice: &'a Lattice,
        beta: f64,
        u: f64,
        events: &[(usize, usize, f64, EventKind)],
    ) -> Result<Self, RealisationError> {
        validate_params(beta, u)?;
        let mut per_edge: Vec<Vec<(f64, EventKind)>> = vec![Vec::new(); lattice.edge_count()];
        for &(a, b, t, kind) in events {
            let edge = lattice
                .edge_between(a, b)
                .ok_or(RealisationError::NotAnEdge(a, b))?;
            if !(0.0..beta).contains(&t) {
                return Err(RealisationError::TimeOutOfRange { time: t, beta });
            }
            per_edge[edge].push((t, kind));
        }
        for (edge, evs) in per_edge.iter_mut().enumerate() {
            evs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            if let Some(w) = evs.windows(2).find(|w| w[0].0 >= w[1].0) {
                return Err(RealisationError::DuplicateTime { edge, time: w[0].0 });
            }
        }
        Self::build(lattice, beta, u, per_edge)
    }

    /// Copy of this realisation with one extra event inserted. Used by the
    /// split/merge and rewiring diagnostics.
    pub fn with_extra_event(
        &self,
        edge: usize,
        time: f64,
        kind: EventKind,
    ) -> Result<Self, RealisationError> {
        if !(0.0..self.beta).contains(&time) {
            return Err(RealisationError::TimeOutOfRange { time, beta: self.beta });
        }
        let mut per_edge: Vec<Vec<(f64, EventKind)>> = (0..self.lattice.edge_count())
            .map(|e| self.edge_events(e).iter().map(|ev| (ev.time, ev.kind)).collect())
            .collect();
        let evs = &mut per_edge[edge];
        let pos = evs.partition_point(|&(t, _)| t < time);
        if evs.get(pos).is_some_and(|&(t, _)| t == time) {
            return Err(RealisationError::DuplicateTime { edge, time });
        }
        evs.insert(pos, (time, kind));
        Self::build(self.lattice, self.beta, self.u, per_edge)
    }

    /// `per_edge` must be time-sorted and strictly increasing per edge.
    fn build(
        lattice: &'a Lattice,
        beta: f64,
        u: f64,
        per_edge: Vec<Vec<(f64, EventKind)>>,
    ) -> Result<Self, RealisationError> {
        let total: usize = per_edge.iter().map(Vec::len).sum();
        let mut events = Vec::with_capacity(total);
        let mut edge_offsets = Vec::with_capacity(per_edge.len() + 1);
        edge_offsets.push(0u32);
        for (edge, evs) in per_edge.iter().enumerate() {
            for &(time, kind) in evs {
                events.push(Event { edge: edge as u32, time, kind });
            }
            edge_offsets.push(events.len() as u32);
        }

        // Per-site timelines: counting pass, then fill, then time-sort.
        let sites = lattice.site_count();
        let mut counts = vec![0u32; sites];
        for ev in &events {
            let (a, b) = lattice.edge_endpoints(ev.edge as usize);
            counts[a] += 1;
            counts[b] += 1;
        }
        let mut site_offsets = Vec::with_capacity(sites + 1);
        let mut acc = 0u32;
        site_offsets.push(0);
        for c in &counts {
            acc += c;
            site_offsets.push(acc);
        }
        let mut cursor: Vec<u32> = site_offsets[..sites].to_vec();
        let mut timeline_events = vec![0u32; 2 * events.len()];
        for (id, ev) in events.iter().enumerate() {
            let (a, b) = lattice.edge_endpoints(ev.edge as usize);
            for s in [a, b] {
                timeline_events[cursor[s] as usize] = id as u32;
                cursor[s] += 1;
            }
        }
        let mut event_slots = vec![[u32::MAX; 2]; events.len()];
        for site in 0..sites {
            let lo = site_offsets[site] as usize;
            let hi = site_offsets[site + 1] as usize;
            let slots = &mut timeline_events[lo..hi];
            slots.sort_unstable_by(|&x, &y| {
                events[x as usize].time.partial_cmp(&events[y as usize].time).unwrap()
            });
            for w in slots.windows(2) {
                if events[w[0] as usize].time >= events[w[1] as usize].time {
                    return Err(RealisationError::TimelineTie {
                        site,
                        time: events[w[0] as usize].time,
                    });
                }
            }
            for (slot, &id) in slots.iter().enumerate() {
                let ev = &events[id as usize];
                let (a, _) = lattice.edge_endpoints(ev.edge as usize);
                let side = usize::from(site != a);
                event_slots[id as usize][side] = slot as u32;
            }
        }

        Ok(Realisation {
            lattice,
            beta,
            u,
            events,
            edge_offsets,
            site_offsets,
            timeline_events,
            event_slots,
        })
    }

    pub fn lattice(&self) -> &'a Lattice {
        self.lattice
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    /// Total number of events across all edges.
    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events on one edge, time-sorted.
    pub fn edge_events(&self, edge: usize) -> &[Event] {
        let lo = self.edge_offsets[edge] as usize;
        let hi = self.edge_offsets[edge + 1] as usize;
        &self.events[lo..hi]
    }

    /// Time-sorted event ids on `site`'s line.
    pub fn site_timeline(&self, site: usize) -> &[u32] {
        let lo = self.site_offsets[site] as usize;
        let hi = self.site_offsets[site + 1] as usize;
        &self.timeline_events[lo..hi]
    }

    pub(crate) fn event(&self, id: u32) -> &Event {
        &self.events[id as usize]
    }

    /// Slot of event `id` in the timeline of the given endpoint side
    /// (0 = first endpoint of its edge, 1 = second).
    pub(crate) fn event_slot(&self, id: u32, side: usize) -> u32 {
        self.event_slots[id as usize][side]
    }

    /// Diagnostic dump: one record per event, `site_a site_b time kind`,
    /// with `#`-prefixed comment lines. Times are printed with 17
    /// significant digits so a round-trip through [`Self::read_events`]
    /// reproduces the realisation exactly.
    pub fn write_events(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(
            w,
            "# loopsim events v1 side={} bc={} beta={:.16e} u={:.16e} events={}",
            self.lattice.side(),
            self.lattice.bc(),
            self.beta,
            self.u,
            self.events.len()
        )?;
        for ev in &self.events {
            let (a, b) = self.lattice.edge_endpoints(ev.edge as usize);
            let kind = match ev.kind {
                EventKind::Cross => "cross",
                EventKind::Bar => "bar",
            };
            writeln!(w, "{a} {b} {:.16e} {kind}", ev.time)?;
        }
        Ok(())
    }

    /// Load a dump produced by [`Self::write_events`]. The lattice, `beta`
    /// and `u` are supplied by the caller; records are validated against
    /// them.
    pub fn read_events(
        lattice: &'a Lattice,
        beta: f64,
        u: f64,
        r: impl BufRead,
    ) -> Result<Self, RealisationError> {
        let mut records = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let parse_err = |msg: &str| RealisationError::Parse {
                line: idx + 1,
                msg: msg.to_string(),
            };
            let a: usize = fields
                .next()
                .ok_or_else(|| parse_err("missing site_a"))?
                .parse()
                .map_err(|_| parse_err("bad site_a"))?;
            let b: usize = fields
                .next()
                .ok_or_else(|| parse_err("missing site_b"))?
                .parse()
                .map_err(|_| parse_err("bad site_b"))?;
            let t: f64 = fields
                .next()
                .ok_or_else(|| parse_err("missing time"))?
                .parse()
                .map_err(|_| parse_err("bad time"))?;
            let kind = match fields.next().ok_or_else(|| parse_err("missing kind"))? {
                "cross" => EventKind::Cross,
                "bar" => EventKind::Bar,
                other => return Err(parse_err(&format!("unknown kind `{other}`"))),
            };
            if fields.next().is_some() {
                return Err(parse_err("trailing fields"));
            }
            records.push((a, b, t, kind));
        }
        Self::from_events(lattice, beta, u, &records)
    }
}

fn validate_params(beta: f64, u: f64) -> Result<(), RealisationError> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(RealisationError::NonPositiveBeta(beta));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(RealisationError::InvalidU(u));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::BoundaryCondition;
    use crate::rng::stream_rng;

    fn lat3() -> Lattice {
        Lattice::new(3, BoundaryCondition::Periodic).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        let lat = lat3();
        let mut rng = stream_rng(0, 0);
        assert!(matches!(
            Realisation::sample(&lat, 0.0, 0.5, &mut rng),
            Err(RealisationError::NonPositiveBeta(_))
        ));
        assert!(matches!(
            Realisation::sample(&lat, 1.0, 1.5, &mut rng),
            Err(RealisationError::InvalidU(_))
        ));
    }

    #[test]
    fn u_one_yields_only_crosses() {
        let lat = lat3();
        let mut rng = stream_rng(1, 0);
        let r = Realisation::sample(&lat, 2.0, 1.0, &mut rng).unwrap();
        assert!(r.event_count() > 0);
        assert!(r.events().iter().all(|e| e.kind == EventKind::Cross));
        let mut rng = stream_rng(1, 1);
        let r = Realisation::sample(&lat, 2.0, 0.0, &mut rng).unwrap();
        assert!(r.events().iter().all(|e| e.kind == EventKind::Bar));
    }

    #[test]
    fn empty_realisation_has_empty_timelines() {
        let lat = lat3();
        let r = Realisation::from_events(&lat, 1.0, 0.5, &[]).unwrap();
        assert_eq!(r.event_count(), 0);
        for s in 0..lat.site_count() {
            assert!(r.site_timeline(s).is_empty());
        }
    }

    #[test]
    fn event_count_matches_timeline_halves() {
        let lat = lat3();
        let mut rng = stream_rng(2, 0);
        let r = Realisation::sample(&lat, 1.5, 0.5, &mut rng).unwrap();
        let timeline_total: usize = (0..lat.site_count()).map(|s| r.site_timeline(s).len()).sum();
        assert_eq!(r.event_count() * 2, timeline_total);

        let single = Realisation::from_events(&lat, 1.0, 1.0, &[(0, 1, 0.25, EventKind::Cross)])
            .unwrap();
        assert_eq!(single.event_count(), 1);
    }

    #[test]
    fn mean_event_count_matches_poisson_intensity() {
        // Poisson mean per edge is beta; total mean is beta * edge count.
        let lat = Lattice::new(8, BoundaryCondition::Periodic).unwrap();
        let beta = 1.0;
        let n_samples = 10_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n_samples {
            let mut rng = stream_rng(42, i);
            let c = Realisation::sample(&lat, beta, 1.0, &mut rng).unwrap().event_count() as f64;
            sum += c;
            sumsq += c * c;
        }
        let n = n_samples as f64;
        let mean = sum / n;
        let var = (sumsq - n * mean * mean) / (n - 1.0);
        let stderr = (var / n).sqrt();
        let expected = beta * lat.edge_count() as f64; // 3 * 8^3 = 1536
        assert_eq!(lat.edge_count(), 1536);
        assert!(
            (mean - expected).abs() < 3.0 * stderr,
            "mean {mean} vs expected {expected} (stderr {stderr})"
        );
    }

    #[test]
    fn cross_fraction_matches_u() {
        let lat = lat3();
        let u = 0.3;
        let mut crosses = 0usize;
        let mut total = 0usize;
        for i in 0..2000u64 {
            let mut rng = stream_rng(7, i);
            let r = Realisation::sample(&lat, 1.0, u, &mut rng).unwrap();
            crosses += r.events().iter().filter(|e| e.kind == EventKind::Cross).count();
            total += r.event_count();
        }
        let frac = crosses as f64 / total as f64;
        let sigma = (u * (1.0 - u) / total as f64).sqrt();
        assert!(
            (frac - u).abs() < 3.0 * sigma,
            "cross fraction {frac} vs u {u} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn timelines_are_sorted_and_consistent_with_edges() {
        let lat = lat3();
        let mut rng = stream_rng(3, 5);
        let r = Realisation::sample(&lat, 2.0, 0.4, &mut rng).unwrap();

        let mut seen = vec![0usize; r.event_count()];
        for s in 0..lat.site_count() {
            let tl = r.site_timeline(s);
            for w in tl.windows(2) {
                assert!(r.event(w[0]).time < r.event(w[1]).time);
            }
            for &id in tl {
                let (a, b) = lat.edge_endpoints(r.event(id).edge as usize);
                assert!(s == a || s == b);
                let side = usize::from(s != a);
                let slot = r.event_slot(id, side) as usize;
                assert_eq!(tl[slot], id);
                seen[id as usize] += 1;
            }
        }
        // Every event appears in exactly two site timelines.
        assert!(seen.iter().all(|&c| c == 2));
        // Per-edge lists are time-sorted and partition the event set.
        let total: usize = (0..lat.edge_count()).map(|e| r.edge_events(e).len()).sum();
        assert_eq!(total, r.event_count());
    }

    #[test]
    fn from_events_validates() {
        let lat = lat3();
        assert!(matches!(
            Realisation::from_events(&lat, 1.0, 0.5, &[(0, 4, 0.5, EventKind::Bar)]),
            Err(RealisationError::NotAnEdge(0, 4))
        ));
        assert!(matches!(
            Realisation::from_events(&lat, 1.0, 0.5, &[(0, 1, 1.0, EventKind::Bar)]),
            Err(RealisationError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            Realisation::from_events(
                &lat,
                1.0,
                0.5,
                &[(0, 1, 0.5, EventKind::Bar), (1, 0, 0.5, EventKind::Cross)]
            ),
            Err(RealisationError::DuplicateTime { .. })
        ));
        // Equal times at a shared site on distinct edges are rejected too.
        assert!(matches!(
            Realisation::from_events(
                &lat,
                1.0,
                0.5,
                &[(0, 1, 0.5, EventKind::Bar), (1, 2, 0.5, EventKind::Cross)]
            ),
            Err(RealisationError::TimelineTie { .. })
        ));
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let lat = lat3();
        let mut rng = stream_rng(11, 0);
        let r = Realisation::sample(&lat, 1.7, 0.6, &mut rng).unwrap();
        let mut buf = Vec::new();
        r.write_events(&mut buf).unwrap();
        let back = Realisation::read_events(&lat, 1.7, 0.6, buf.as_slice()).unwrap();
        assert_eq!(back.event_count(), r.event_count());
        for e in 0..lat.edge_count() {
            assert_eq!(back.edge_events(e), r.edge_events(e));
        }
    }

    #[test]
    fn with_extra_event_inserts_in_order() {
        let lat = lat3();
        let r = Realisation::from_events(&lat, 1.0, 0.5, &[(0, 1, 0.5, EventKind::Bar)]).unwrap();
        let edge = lat.edge_between(0, 1).unwrap();
        let r2 = r.with_extra_event(edge, 0.25, EventKind::Cross).unwrap();
        assert_eq!(r2.event_count(), 2);
        let evs = r2.edge_events(edge);
        assert_eq!(evs[0].time, 0.25);
        assert_eq!(evs[1].time, 0.5);
        assert!(matches!(
            r.with_extra_event(edge, 0.5, EventKind::Cross),
            Err(RealisationError::DuplicateTime { .. })
        ));
    }
}
