//! Factory hall layout and in-robot subnetwork mobility.
//!
//! The hall is a grid of rectangular obstacle blocks separated by straight
//! alleys that run wall to wall. Every alley carries two lanes with
//! right-hand traffic. Robots follow their lane, pick a uniformly random
//! manoeuvre (straight, left, right) at each crossing and U-turn at the
//! walls.
//!
//! Collision avoidance works on two levels:
//!
//! - an intersection box admits one robot at a time; robots closer to a
//!   crossing are processed first and therefore win it,
//! - every candidate move is rejected if it would bring the robot within
//!   `min_separation_m` of another robot, in which case the robot halves
//!   its speed and retries, or holds its position.
//!
//! Holding position is always safe, so pairwise separation never drops
//! below the minimum once it holds at spawn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::{Error, Result};

pub type Point = [f64; 2];

#[inline]
pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub width_m: f64,
    pub height_m: f64,
    pub alley_width_m: f64,
    /// Rows of obstacle blocks; `rows - 1` horizontal alleys separate them.
    pub obstacle_rows: usize,
    /// Columns of obstacle blocks; `cols - 1` vertical alleys separate them.
    pub obstacle_cols: usize,
    /// Random displacement of each alley, as a fraction of the block size.
    pub alley_jitter: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            width_m: 180.0,
            height_m: 80.0,
            alley_width_m: 5.0,
            obstacle_rows: 2,
            obstacle_cols: 3,
            alley_jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// A straight two-lane alley. `center` is the fixed coordinate of the
/// centerline (y for horizontal alleys, x for vertical ones); the alley
/// spans `[0, length]` along its axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alley {
    pub axis: Axis,
    pub center: f64,
    pub length: f64,
    /// Crossings along this alley, sorted by coordinate: `(coordinate, other alley)`.
    pub crossings: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub min: Point,
    pub max: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoryLayout {
    pub width_m: f64,
    pub height_m: f64,
    pub alley_width_m: f64,
    pub alleys: Vec<Alley>,
    pub zones: Vec<Zone>,
    pub intersections: Vec<Point>,
}

fn alley_centers(extent: f64, blocks: usize, width: f64, jitter: f64, r: &mut impl Rng) -> Vec<f64> {
    let block = (extent - (blocks as f64 - 1.0) * width) / blocks as f64;
    (1..blocks)
        .map(|i| {
            let nominal = i as f64 * block + (i as f64 - 0.5) * width;
            let shift = if jitter > 0.0 { r.random_range(-0.5..=0.5) * jitter * block } else { 0.0 };
            nominal + shift
        })
        .collect()
}

/// Builds the hall layout. Deterministic in `seed`.
pub fn build_layout(seed: u64, config: &LayoutConfig) -> Result<FactoryLayout> {
    let (w, h, aw) = (config.width_m, config.height_m, config.alley_width_m);
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::config("hall width and height must be positive"));
    }
    if !(aw > 0.0) || aw > w.min(h) {
        return Err(Error::config(format!(
            "alley width {aw} m must be positive and fit inside a {w} x {h} m hall"
        )));
    }
    if !(0.0..1.0).contains(&config.alley_jitter) {
        return Err(Error::config("alley_jitter must lie in [0, 1)"));
    }
    let mut r = rng::stream(seed, &[tag::LAYOUT]);

    if config.obstacle_rows == 0 || config.obstacle_cols == 0 {
        // Open hall: one central corridor, nothing to cross.
        return Ok(FactoryLayout {
            width_m: w,
            height_m: h,
            alley_width_m: aw,
            alleys: vec![Alley { axis: Axis::Horizontal, center: h / 2.0, length: w, crossings: vec![] }],
            zones: vec![],
            intersections: vec![],
        });
    }

    let (rows, cols) = (config.obstacle_rows, config.obstacle_cols);
    let block_h = (h - (rows as f64 - 1.0) * aw) / rows as f64;
    let block_w = (w - (cols as f64 - 1.0) * aw) / cols as f64;
    if block_h <= aw || block_w <= aw {
        return Err(Error::config("too many obstacle rows/columns for the hall size"));
    }
    let ys = alley_centers(h, rows, aw, config.alley_jitter, &mut r);
    let xs = alley_centers(w, cols, aw, config.alley_jitter, &mut r);
    if ys.is_empty() && xs.is_empty() {
        return Err(Error::config("a single obstacle block leaves no drivable alley"));
    }

    let mut alleys: Vec<Alley> = ys
        .iter()
        .map(|&y| Alley { axis: Axis::Horizontal, center: y, length: w, crossings: vec![] })
        .chain(xs.iter().map(|&x| Alley { axis: Axis::Vertical, center: x, length: h, crossings: vec![] }))
        .collect();
    let mut intersections = Vec::new();
    let n_h = ys.len();
    for (hi, &y) in ys.iter().enumerate() {
        for (vj, &x) in xs.iter().enumerate() {
            let vi = n_h + vj;
            alleys[hi].crossings.push((x, vi));
            alleys[vi].crossings.push((y, hi));
            intersections.push([x, y]);
        }
    }
    for a in &mut alleys {
        a.crossings.sort_by(|p, q| p.0.total_cmp(&q.0));
    }

    let bounds = |centers: &[f64], extent: f64| -> Vec<(f64, f64)> {
        let mut edges = vec![0.0];
        for &c in centers {
            edges.push(c - aw / 2.0);
            edges.push(c + aw / 2.0);
        }
        edges.push(extent);
        edges.chunks(2).map(|p| (p[0], p[1])).collect()
    };
    let mut zones = Vec::new();
    for (y0, y1) in bounds(&ys, h) {
        for &(x0, x1) in &bounds(&xs, w) {
            zones.push(Zone { min: [x0, y0], max: [x1, y1] });
        }
    }

    Ok(FactoryLayout { width_m: w, height_m: h, alley_width_m: aw, alleys, zones, intersections })
}

impl FactoryLayout {
    /// Floor area covered by alleys (crossings counted once).
    pub fn alley_area(&self) -> f64 {
        let w = self.alley_width_m;
        let gross: f64 = self.alleys.iter().map(|a| a.length * w).sum();
        gross - self.intersections.len() as f64 * w * w
    }

    pub fn lane_offset(&self) -> f64 {
        self.alley_width_m / 4.0
    }

    /// Point on the lane of `alley` travelled in direction `dir` at coordinate `s`.
    pub fn lane_point(&self, alley: usize, dir: i8, s: f64) -> Point {
        let a = &self.alleys[alley];
        let off = self.lane_offset() * dir as f64;
        match a.axis {
            Axis::Horizontal => [s, a.center - off],
            Axis::Vertical => [a.center + off, s],
        }
    }

    fn heading(&self, alley: usize, dir: i8) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match (self.alleys[alley].axis, dir > 0) {
            (Axis::Horizontal, true) => 0.0,
            (Axis::Horizontal, false) => PI,
            (Axis::Vertical, true) => FRAC_PI_2,
            (Axis::Vertical, false) => -FRAC_PI_2,
        }
    }

    /// Half side of the square around each crossing that admits one robot.
    fn box_half(&self, min_sep: f64) -> f64 {
        self.alley_width_m / 2.0 + min_sep
    }

    fn box_of(&self, p: Point, min_sep: f64) -> Option<usize> {
        let half = self.box_half(min_sep);
        self.intersections
            .iter()
            .position(|c| (p[0] - c[0]).abs() < half && (p[1] - c[1]).abs() < half)
    }

    /// True when `p` lies inside the hall and on some alley.
    pub fn on_alley(&self, p: Point) -> bool {
        let half = self.alley_width_m / 2.0 + 1e-9;
        let inside = (-1e-9..=self.width_m + 1e-9).contains(&p[0]) && (-1e-9..=self.height_m + 1e-9).contains(&p[1]);
        inside
            && self.alleys.iter().any(|a| match a.axis {
                Axis::Horizontal => (p[1] - a.center).abs() <= half,
                Axis::Vertical => (p[0] - a.center).abs() <= half,
            })
    }

    fn end_margin(&self) -> f64 {
        self.alley_width_m / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub subnetwork_id: usize,
    pub position: Point,
    pub heading: f64,
    pub speed_mps: f64,
    pub alley: usize,
    /// +1 along the alley axis, -1 against it.
    pub dir: i8,
    /// Coordinate along the alley axis.
    pub s: f64,
    pub slowdown_flag: bool,
    /// Device positions relative to the AP; fixed for the episode.
    pub device_offsets: Vec<Point>,
    /// Key of the robot's manoeuvre stream and the number of decisions taken.
    pub route_seed: u64,
    pub decisions: u64,
}

impl RobotState {
    pub fn device_position(&self, m: usize) -> Point {
        let o = self.device_offsets[m];
        [self.position[0] + o[0], self.position[1] + o[1]]
    }

    /// Upcoming lane waypoints: the crossings ahead and the alley end.
    pub fn route(&self, layout: &FactoryLayout) -> Vec<Point> {
        let a = &layout.alleys[self.alley];
        let d = self.dir as f64;
        let mut pts: Vec<Point> = if self.dir > 0 {
            a.crossings.iter().filter(|c| c.0 > self.s).map(|c| layout.lane_point(self.alley, self.dir, c.0)).collect()
        } else {
            a.crossings.iter().rev().filter(|c| c.0 < self.s).map(|c| layout.lane_point(self.alley, self.dir, c.0)).collect()
        };
        let end = if d > 0.0 { a.length - layout.end_margin() } else { layout.end_margin() };
        pts.push(layout.lane_point(self.alley, self.dir, end));
        pts
    }

    fn distance_to_next_crossing(&self, layout: &FactoryLayout, min_sep: f64) -> f64 {
        if layout.box_of(self.position, min_sep).is_some() {
            return 0.0;
        }
        let a = &layout.alleys[self.alley];
        a.crossings
            .iter()
            .map(|c| (c.0 - self.s) * self.dir as f64)
            .filter(|&d| d > 0.0)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub speed_mps: f64,
    pub min_separation_m: f64,
    pub device_radius_m: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self { speed_mps: 3.0, min_separation_m: 1.0, device_radius_m: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub robots: Vec<RobotState>,
    pub min_separation_m: f64,
    pub devices_per_subnetwork: usize,
    pub device_radius_m: f64,
    pub max_speed_mps: f64,
}

impl Deployment {
    pub fn len(&self) -> usize {
        self.robots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.robots.is_empty()
    }

    pub fn ap_positions(&self) -> Vec<Point> {
        self.robots.iter().map(|r| r.position).collect()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.robots.iter().enumerate() {
            for b in &self.robots[i + 1..] {
                best = best.min(distance(a.position, b.position));
            }
        }
        best
    }
}

/// Places `n` robots on lanes at least `min_separation_m` apart, each with
/// `m_per_subnet` devices uniformly distributed in a disc around its AP.
pub fn spawn(layout: &FactoryLayout, n: usize, m_per_subnet: usize, mobility: &MobilityConfig, seed: u64) -> Result<Deployment> {
    if n == 0 || m_per_subnet == 0 {
        return Err(Error::config("need at least one subnetwork and one device per subnetwork"));
    }
    let sep = mobility.min_separation_m;
    let mut r = rng::stream(seed, &[tag::SPAWN]);
    let margin = layout.end_margin();
    let total_len: f64 = layout.alleys.iter().map(|a| a.length - 2.0 * margin).sum();
    let max_tries = 2000 * n;
    let mut robots: Vec<RobotState> = Vec::with_capacity(n);
    let mut tries = 0;
    while robots.len() < n {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Spawn(format!(
                "placed only {} of {n} subnetworks with {sep} m separation",
                robots.len()
            )));
        }
        // Alley chosen proportionally to its length.
        let mut pick = r.random_range(0.0..total_len);
        let mut alley = 0;
        for (i, a) in layout.alleys.iter().enumerate() {
            let len = a.length - 2.0 * margin;
            if pick < len {
                alley = i;
                break;
            }
            pick -= len;
        }
        let a = &layout.alleys[alley];
        let s = r.random_range(margin..a.length - margin);
        let dir: i8 = if r.random_bool(0.5) { 1 } else { -1 };
        let p = layout.lane_point(alley, dir, s);
        if layout.box_of(p, sep).is_some() || robots.iter().any(|o| distance(o.position, p) < sep) {
            continue;
        }
        let id = robots.len();
        let device_offsets = (0..m_per_subnet)
            .map(|_| {
                let rad = mobility.device_radius_m * r.random::<f64>().sqrt();
                let th = r.random_range(0.0..std::f64::consts::TAU);
                [rad * th.cos(), rad * th.sin()]
            })
            .collect();
        robots.push(RobotState {
            subnetwork_id: id,
            position: p,
            heading: layout.heading(alley, dir),
            speed_mps: mobility.speed_mps,
            alley,
            dir,
            s,
            slowdown_flag: false,
            device_offsets,
            route_seed: rng::mix(seed, &[tag::ROUTE, id as u64]),
            decisions: 0,
        });
    }
    Ok(Deployment {
        robots,
        min_separation_m: sep,
        devices_per_subnetwork: m_per_subnet,
        device_radius_m: mobility.device_radius_m,
        max_speed_mps: mobility.speed_mps,
    })
}

/// Where a robot would end up after travelling `dist` along its route.
fn advance(layout: &FactoryLayout, robot: &RobotState, dist: f64) -> (usize, i8, f64, u64) {
    let (mut alley, mut dir, mut s, mut decisions) = (robot.alley, robot.dir, robot.s, robot.decisions);
    let mut remaining = dist;
    // Each iteration consumes at least one event; bounded for safety.
    for _ in 0..8 {
        if remaining <= 0.0 {
            break;
        }
        let a = &layout.alleys[alley];
        let d = dir as f64;
        let target = s + d * remaining;
        let crossing = a
            .crossings
            .iter()
            .filter(|c| (c.0 - s) * d > 0.0 && (c.0 - target) * d <= 0.0)
            .min_by(|p, q| ((p.0 - s) * d).total_cmp(&((q.0 - s) * d)))
            .copied();
        if let Some((coord, other)) = crossing {
            let u = rng::unit(robot.route_seed, &[decisions]);
            decisions += 1;
            remaining -= (coord - s).abs();
            if u < 1.0 / 3.0 {
                s = coord;
                continue;
            }
            let new_dir: i8 = if u < 2.0 / 3.0 { 1 } else { -1 };
            s = a.center;
            alley = other;
            dir = new_dir;
            continue;
        }
        let (lo, hi) = (layout.end_margin(), a.length - layout.end_margin());
        if target > hi || target < lo {
            let wall = if d > 0.0 { hi } else { lo };
            remaining -= (wall - s).abs();
            s = wall;
            dir = -dir;
            continue;
        }
        s = target;
        remaining = 0.0;
    }
    (alley, dir, s, decisions)
}

/// Advances every robot by `dt_s`, resolving conflicts as described in the
/// module docs. Robots are processed by distance to their next crossing,
/// then by id.
pub fn step_mobility(deployment: &Deployment, layout: &FactoryLayout, dt_s: f64) -> Deployment {
    let mut next = deployment.clone();
    step_mobility_in_place(&mut next, layout, dt_s);
    next
}

pub fn step_mobility_in_place(deployment: &mut Deployment, layout: &FactoryLayout, dt_s: f64) {
    let sep = deployment.min_separation_m;
    let v_max = deployment.max_speed_mps;
    let mut order: Vec<(f64, usize)> = deployment
        .robots
        .iter()
        .map(|r| (r.distance_to_next_crossing(layout, sep), r.subnetwork_id))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut positions: Vec<Point> = deployment.ap_positions();
    for &(_, idx) in &order {
        let robot = &deployment.robots[idx];
        let current_box = layout.box_of(robot.position, sep);
        let admissible = |p: Point, positions: &[Point]| -> bool {
            if positions.iter().enumerate().any(|(j, q)| j != idx && distance(p, *q) < sep) {
                return false;
            }
            match layout.box_of(p, sep) {
                Some(b) if current_box != Some(b) => !positions
                    .iter()
                    .enumerate()
                    .any(|(j, q)| j != idx && layout.box_of(*q, sep) == Some(b)),
                _ => true,
            }
        };

        let halved = if robot.slowdown_flag { robot.speed_mps / 2.0 } else { v_max / 2.0 };
        let mut committed = None;
        for (speed, slowed) in [(v_max, false), (halved, true)] {
            let (alley, dir, s, decisions) = advance(layout, robot, speed * dt_s);
            let p = layout.lane_point(alley, dir, s);
            if admissible(p, &positions) {
                committed = Some((alley, dir, s, decisions, p, speed, slowed));
                break;
            }
        }
        let robot = &mut deployment.robots[idx];
        match committed {
            Some((alley, dir, s, decisions, p, speed, slowed)) => {
                robot.alley = alley;
                robot.dir = dir;
                robot.s = s;
                robot.decisions = decisions;
                robot.position = p;
                robot.heading = layout.heading(alley, dir);
                robot.speed_mps = speed;
                robot.slowdown_flag = slowed;
                positions[idx] = p;
            }
            None => {
                robot.speed_mps = halved;
                robot.slowdown_flag = true;
            }
        }
    }
    debug_assert!(
        deployment.robots.len() < 2 || deployment.min_pairwise_distance() >= sep - 1e-9,
        "separation violated"
    );
}
