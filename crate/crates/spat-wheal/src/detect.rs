//! Step 2: algorithmic wheal detection on a probability map.
//!
//! The map is thresholded to a binary mask, split into connected components
//! (two-pass union-find), registered to the twelve theoretical prick
//! locations with a grid search over a rigid transform (translation +
//! rotation, modeling arm repositioning), and finally matched greedily, one
//! wheal per prick. Everything here is a pure function of its inputs, so
//! identical maps give identical results.
//!
//! Coordinate conventions: pixel (x, y) has its center at (x + 0.5, y + 0.5)
//! in pixel coordinates with y increasing downward; millimeter coordinates
//! share the axes and place their origin at the image center. A transform
//! maps layout points (device mm) into image mm as `R(theta) * p + t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("threshold must be inside (0, 1), got {0}")]
    Threshold(f64),
    #[error("degenerate grid: {0}")]
    Grid(String),
    #[error("prick layout must have exactly 12 distinct points")]
    Layout,
    #[error("dimension mismatch: {0}")]
    Dims(String),
}

/// Per-pixel wheal probability in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        SegmentationMap { width, height, data }
    }
}

/// Row-major boolean mask, tagged with the threshold that produced it when
/// it came from [`binarize`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub threshold: Option<f64>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
            threshold: None,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Pixel connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// One detected connected region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhealRegion {
    /// Member pixels as (x, y), sorted row-major.
    pub pixels: Vec<(u32, u32)>,
    pub area_px: usize,
    pub area_mm2: f64,
    /// Mean of pixel centers, in pixel coordinates.
    pub centroid_px: (f64, f64),
    /// (x0, y0, x1, y1), inclusive.
    pub bbox: (u32, u32, u32, u32),
}

/// The twelve theoretical prick locations in device millimeter coordinates
/// (origin mapping to the image center) plus the device-to-image scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrickLayout {
    pub points_mm: Vec<[f64; 2]>,
    pub mm_per_px: f64,
}

impl PrickLayout {
    /// 4 x 3 grid, 10 mm column / 8 mm row spacing, centered on the image.
    pub fn standard(mm_per_px: f64) -> Self {
        let mut points_mm = Vec::with_capacity(12);
        for &y in &[-8.0, 0.0, 8.0] {
            for &x in &[-15.0, -5.0, 5.0, 15.0] {
                points_mm.push([x, y]);
            }
        }
        PrickLayout { points_mm, mm_per_px }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if self.points_mm.len() != crate::PRICK_COUNT {
            return Err(DetectError::Layout);
        }
        for i in 0..self.points_mm.len() {
            for j in i + 1..self.points_mm.len() {
                if self.points_mm[i] == self.points_mm[j] {
                    return Err(DetectError::Layout);
                }
            }
        }
        Ok(())
    }
}

/// Rigid repositioning transform: translation (mm) plus rotation (degrees),
/// applied to layout points as `R(theta) * p + t` in image-centered mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub tx_mm: f64,
    pub ty_mm: f64,
    pub theta_deg: f64,
}

impl RigidTransform2D {
    pub fn identity() -> Self {
        RigidTransform2D {
            tx_mm: 0.0,
            ty_mm: 0.0,
            theta_deg: 0.0,
        }
    }

    pub fn apply_mm(&self, p: [f64; 2]) -> [f64; 2] {
        let th = self.theta_deg.to_radians();
        let (s, c) = th.sin_cos();
        [
            c * p[0] - s * p[1] + self.tx_mm,
            s * p[0] + c * p[1] + self.ty_mm,
        ]
    }
}

/// One grid-search axis: inclusive bounds and a positive step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, step: f64) -> Self {
        GridAxis { min, max, step }
    }

    fn values(&self) -> Result<Vec<f64>, DetectError> {
        if !(self.step > 0.0) || self.min > self.max {
            return Err(DetectError::Grid(format!(
                "axis [{}, {}] step {}",
                self.min, self.max, self.step
            )));
        }
        let n = ((self.max - self.min) / self.step + 0.5).floor() as usize + 1;
        Ok((0..n).map(|i| self.min + i as f64 * self.step).collect())
    }
}

/// Search ranges for the rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub tx: GridAxis,
    pub ty: GridAxis,
    pub theta: GridAxis,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            tx: GridAxis::new(-10.0, 10.0, 0.5),
            ty: GridAxis::new(-10.0, 10.0, 0.5),
            theta: GridAxis::new(-5.0, 5.0, 0.5),
        }
    }
}

/// Pricks paired with regions (at most one each way), the leftovers, and
/// the transform the grid search chose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchResult {
    pub transform: RigidTransform2D,
    /// Grid-search objective at the chosen transform (mm).
    pub objective_mm: f64,
    /// Slot k holds the region matched to prick k.
    pub matches: Vec<Option<WhealRegion>>,
    /// Centroid-to-prick distance for each match (mm).
    pub match_distance_mm: Vec<Option<f64>>,
    /// Detected regions left without a prick (including sub-minimum-area
    /// candidates, kept for diagnostics).
    pub unmatched: Vec<WhealRegion>,
}

/// Thresholds a probability map; a pixel is foreground iff its value is
/// greater than or equal to the threshold (ties are foreground).
pub fn binarize(map: &SegmentationMap, threshold: f64) -> Result<BinaryMask, DetectError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DetectError::Threshold(threshold));
    }
    Ok(BinaryMask {
        width: map.width,
        height: map.height,
        data: map.data.iter().map(|&v| f64::from(v) >= threshold).collect(),
        threshold: Some(threshold),
    })
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        // attach the smaller tree; ties keep the lower root for determinism
        let (hi, lo) = if (self.size[ra as usize], rb) > (self.size[rb as usize], ra) {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        self.size[hi as usize] += self.size[lo as usize];
    }
}

/// Two-pass union-find connected-component labeling. Regions come back in
/// decreasing area order (ties broken by first pixel in row-major order);
/// every foreground pixel belongs to exactly one region.
pub fn connected_components(
    mask: &BinaryMask,
    connectivity: Connectivity,
    mm_per_px: f64,
) -> Vec<WhealRegion> {
    let (w, h) = (mask.width, mask.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let mut uf = UnionFind::new(w * h);
    // first pass: union each foreground pixel with earlier neighbors
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let idx = (y * w + x) as u32;
            if x > 0 && mask.get(x - 1, y) {
                uf.union(idx, idx - 1);
            }
            if y > 0 {
                if mask.get(x, y - 1) {
                    uf.union(idx, idx - w as u32);
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && mask.get(x - 1, y - 1) {
                        uf.union(idx, idx - w as u32 - 1);
                    }
                    if x + 1 < w && mask.get(x + 1, y - 1) {
                        uf.union(idx, idx - w as u32 + 1);
                    }
                }
            }
        }
    }
    // second pass: collect pixels per root in row-major order
    let mut root_slot: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    let mut groups: Vec<Vec<(u32, u32)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let root = uf.find((y * w + x) as u32);
            let slot = *root_slot.entry(root).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[slot].push((x as u32, y as u32));
        }
    }
    let mut regions: Vec<WhealRegion> = groups
        .into_iter()
        .map(|pixels| region_from_pixels(pixels, mm_per_px))
        .collect();
    regions.sort_by(|a, b| {
        b.area_px
            .cmp(&a.area_px)
            .then_with(|| a.pixels[0].1.cmp(&b.pixels[0].1))
            .then_with(|| a.pixels[0].0.cmp(&b.pixels[0].0))
    });
    regions
}

fn region_from_pixels(pixels: Vec<(u32, u32)>, mm_per_px: f64) -> WhealRegion {
    let area_px = pixels.len();
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for &(x, y) in &pixels {
        sx += f64::from(x) + 0.5;
        sy += f64::from(y) + 0.5;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    WhealRegion {
        area_px,
        area_mm2: area_px as f64 * mm_per_px * mm_per_px,
        centroid_px: (sx / area_px as f64, sy / area_px as f64),
        bbox: (x0, y0, x1, y1),
        pixels,
    }
}

/// Centroid in image-centered millimeter coordinates.
fn centroid_mm(region: &WhealRegion, width: usize, height: usize, mm_per_px: f64) -> [f64; 2] {
    [
        (region.centroid_px.0 - width as f64 / 2.0) * mm_per_px,
        (region.centroid_px.1 - height as f64 / 2.0) * mm_per_px,
    ]
}

fn transform_objective(
    centroids_mm: &[[f64; 2]],
    layout: &PrickLayout,
    t: &RigidTransform2D,
    gate_mm: f64,
) -> f64 {
    let mut total = 0.0;
    for &p in &layout.points_mm {
        let q = t.apply_mm(p);
        let mut best = f64::INFINITY;
        for c in centroids_mm {
            let d = ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        total += best.min(gate_mm);
    }
    total
}

#[derive(PartialEq)]
struct GridCandidate {
    objective: f64,
    abs_key: [f64; 3],
    index: usize,
    transform: RigidTransform2D,
}

impl GridCandidate {
    fn better_than(&self, other: &Self) -> bool {
        self.objective
            .total_cmp(&other.objective)
            .then_with(|| self.abs_key[0].total_cmp(&other.abs_key[0]))
            .then_with(|| self.abs_key[1].total_cmp(&other.abs_key[1]))
            .then_with(|| self.abs_key[2].total_cmp(&other.abs_key[2]))
            .then_with(|| self.index.cmp(&other.index))
            .is_lt()
    }
}

/// Grid search for the rigid transform minimizing the sum over pricks of
/// the (gate-capped) distance to the nearest region centroid. Ties prefer
/// the smallest `(|tx|, |ty|, |theta|)` lexicographically; an empty region
/// list yields the identity transform.
pub fn fit_rigid_transform(
    regions: &[WhealRegion],
    layout: &PrickLayout,
    width: usize,
    height: usize,
    grid: &GridSpec,
    gate_mm: f64,
) -> Result<(RigidTransform2D, f64), DetectError> {
    layout.validate()?;
    let txs = grid.tx.values()?;
    let tys = grid.ty.values()?;
    let thetas = grid.theta.values()?;
    if regions.is_empty() {
        return Ok((
            RigidTransform2D::identity(),
            gate_mm * layout.points_mm.len() as f64,
        ));
    }
    let centroids: Vec<[f64; 2]> = regions
        .iter()
        .map(|r| centroid_mm(r, width, height, layout.mm_per_px))
        .collect();

    // parallel over theta slices; each grid point's objective is computed
    // in a fixed order and candidates reduce through a total order, so the
    // result does not depend on thread scheduling
    let best = thetas
        .par_iter()
        .enumerate()
        .map(|(ti, &theta)| {
            let mut local: Option<GridCandidate> = None;
            for (yi, &ty) in tys.iter().enumerate() {
                for (xi, &tx) in txs.iter().enumerate() {
                    let t = RigidTransform2D {
                        tx_mm: tx,
                        ty_mm: ty,
                        theta_deg: theta,
                    };
                    let obj = transform_objective(&centroids, layout, &t, gate_mm);
                    let cand = GridCandidate {
                        objective: obj,
                        abs_key: [tx.abs(), ty.abs(), theta.abs()],
                        index: (ti * tys.len() + yi) * txs.len() + xi,
                        transform: t,
                    };
                    if local.as_ref().is_none_or(|b| cand.better_than(b)) {
                        local = Some(cand);
                    }
                }
            }
            local.expect("grid axes are non-empty")
        })
        .reduce_with(|a, b| if b.better_than(&a) { b } else { a })
        .expect("theta axis is non-empty");
    Ok((best.transform, best.objective))
}

/// Greedy matching under a chosen transform: repeatedly accept the smallest
/// centroid-to-prick distance not exceeding the gate among still-unmatched
/// pairs. Leftover pricks stay unmatched; leftover regions are returned in
/// `unmatched`.
pub fn greedy_match(
    regions: &[WhealRegion],
    layout: &PrickLayout,
    transform: &RigidTransform2D,
    width: usize,
    height: usize,
    gate_mm: f64,
) -> (Vec<Option<usize>>, Vec<Option<f64>>) {
    let pricks_mm: Vec<[f64; 2]> = layout
        .points_mm
        .iter()
        .map(|&p| transform.apply_mm(p))
        .collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, q) in pricks_mm.iter().enumerate() {
        for (ri, r) in regions.iter().enumerate() {
            let c = centroid_mm(r, width, height, layout.mm_per_px);
            let d = ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt();
            if d <= gate_mm {
                pairs.push((d, pi, ri));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matches: Vec<Option<usize>> = vec![None; layout.points_mm.len()];
    let mut distances: Vec<Option<f64>> = vec![None; layout.points_mm.len()];
    let mut region_used = vec![false; regions.len()];
    for (d, pi, ri) in pairs {
        if matches[pi].is_none() && !region_used[ri] {
            matches[pi] = Some(ri);
            distances[pi] = Some(d);
            region_used[ri] = true;
        }
    }
    (matches, distances)
}

/// Parameters for the full step-2 pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectParams {
    pub threshold: f64,
    pub connectivity: Connectivity,
    /// Candidate regions below this pixel area are excluded from transform
    /// fitting and matching (single-pixel noise suppression) but kept in
    /// the unmatched diagnostics.
    pub min_area_px: usize,
    pub gate_mm: f64,
    pub grid: GridSpec,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            threshold: 0.5,
            connectivity: Connectivity::Eight,
            min_area_px: 4,
            gate_mm: 5.0,
            grid: GridSpec::default(),
        }
    }
}

/// Threshold, label, register, and match a probability map in one call.
pub fn detect_wheals(
    map: &SegmentationMap,
    layout: &PrickLayout,
    params: &DetectParams,
) -> Result<MatchResult, DetectError> {
    let mask = binarize(map, params.threshold)?;
    let all_regions = connected_components(&mask, params.connectivity, layout.mm_per_px);
    let (candidates, too_small): (Vec<WhealRegion>, Vec<WhealRegion>) = all_regions
        .into_iter()
        .partition(|r| r.area_px >= params.min_area_px);
    let (transform, objective) = fit_rigid_transform(
        &candidates,
        layout,
        map.width,
        map.height,
        &params.grid,
        params.gate_mm,
    )?;
    let (match_idx, distances) = greedy_match(
        &candidates,
        layout,
        &transform,
        map.width,
        map.height,
        params.gate_mm,
    );
    let mut used = vec![false; candidates.len()];
    let matches: Vec<Option<WhealRegion>> = match_idx
        .iter()
        .map(|m| {
            m.map(|ri| {
                used[ri] = true;
                candidates[ri].clone()
            })
        })
        .collect();
    let mut unmatched: Vec<WhealRegion> = candidates
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(r, _)| r.clone())
        .collect();
    unmatched.extend(too_small);
    Ok(MatchResult {
        transform,
        objective_mm: objective,
        matches,
        match_distance_mm: distances,
        unmatched,
    })
}

/// Boundary polygons of a region's pixel set. Outer boundaries have
/// positive shoelace area in (x, y) pixel coordinates (counter-clockwise in
/// the mathematical orientation of those axes); holes come out negative.
/// Vertices lie on the pixel grid corners.
pub fn region_contours(region: &WhealRegion) -> Vec<Vec<[f64; 2]>> {
    use std::collections::{HashMap, HashSet};
    let set: HashSet<(u32, u32)> = region.pixels.iter().copied().collect();
    // directed boundary edges with the region on the left in math
    // orientation: (start, end) on corner lattice
    let mut edges: Vec<((i64, i64), (i64, i64))> = Vec::new();
    for &(x, y) in &region.pixels {
        let (x, y) = (i64::from(x), i64::from(y));
        let inside = |px: i64, py: i64| {
            px >= 0 && py >= 0 && set.contains(&(px as u32, py as u32))
        };
        if !inside(x, y - 1) {
            edges.push(((x, y), (x + 1, y)));
        }
        if !inside(x + 1, y) {
            edges.push(((x + 1, y), (x + 1, y + 1)));
        }
        if !inside(x, y + 1) {
            edges.push(((x + 1, y + 1), (x, y + 1)));
        }
        if !inside(x - 1, y) {
            edges.push(((x, y + 1), (x, y)));
        }
    }
    edges.sort();
    let mut by_start: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        by_start.entry(e.0).or_default().push(i);
    }
    let mut visited = vec![false; edges.len()];
    let mut loops = Vec::new();
    for start in 0..edges.len() {
        if visited[start] {
            continue;
        }
        let mut path: Vec<(i64, i64)> = vec![edges[start].0];
        let mut cur = start;
        loop {
            visited[cur] = true;
            let end = edges[cur].1;
            path.push(end);
            if end == edges[start].0 {
                break;
            }
            let outgoing = &by_start[&end];
            // prefer the sharpest left turn so diagonal-touch corners trace
            // consistently
            let dir = (
                edges[cur].1 .0 - edges[cur].0 .0,
                edges[cur].1 .1 - edges[cur].0 .1,
            );
            let next = outgoing
                .iter()
                .copied()
                .filter(|&i| !visited[i])
                .min_by_key(|&i| {
                    let nd = (edges[i].1 .0 - edges[i].0 .0, edges[i].1 .1 - edges[i].0 .1);
                    // cross > 0 is a left turn in math orientation
                    let cross = dir.0 * nd.1 - dir.1 * nd.0;
                    match cross.signum() {
                        1 => 0,  // left
                        0 => 1,  // straight
                        _ => 2,  // right
                    }
                });
            match next {
                Some(i) => cur = i,
                None => break, // closed back onto an earlier vertex
            }
        }
        // drop the duplicated closing vertex, merge collinear runs
        path.pop();
        loops.push(simplify_rectilinear(&path));
    }
    loops
        .into_iter()
        .filter(|l| l.len() >= 3)
        .map(|l| l.into_iter().map(|(x, y)| [x as f64, y as f64]).collect())
        .collect()
}

fn simplify_rectilinear(path: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let n = path.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = path[(i + n - 1) % n];
        let cur = path[i];
        let next = path[(i + 1) % n];
        let d1 = (cur.0 - prev.0, cur.1 - prev.1);
        let d2 = (next.0 - cur.0, next.1 - cur.1);
        if d1.0 * d2.1 - d1.1 * d2.0 != 0 {
            out.push(cur);
        }
    }
    out
}

/// Signed shoelace area of a polygon in (x, y) coordinates.
pub fn shoelace_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}
