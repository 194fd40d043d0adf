//! Building footprints with persistent identities and appearance times.
//!
//! Used both for ground-truth labels and tracker predictions, so the two
//! are interchangeable inputs to the metrics. Coordinates are pixel units:
//! pixel `(row, col)` covers `[col, col+1] × [row, row+1]`, so a polygon
//! contains a pixel when it contains the pixel centre `(col+0.5, row+0.5)`.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{file_err, Error, Result};

/// One building: an outer ring (not repeated at the end) plus the first
/// timestep at which it exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub building_id: String,
    pub vertices: Vec<(f64, f64)>,
    pub appear_t: usize,
}

impl Footprint {
    /// Absolute shoelace area.
    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).abs()
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &self.vertices {
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        point_in_polygon(&self.vertices, x, y)
    }

    /// Pixels `(row, col)` whose centres fall inside, clipped to
    /// `[0, height) × [0, width)` when bounds are given.
    pub fn pixels(&self, bounds: Option<(usize, usize)>) -> Vec<(i64, i64)> {
        let (x0, y0, x1, y1) = self.bbox();
        if !x0.is_finite() {
            return Vec::new();
        }
        let (mut r0, mut r1) = ((y0 - 0.5).ceil() as i64, (y1 - 0.5).floor() as i64);
        let (mut c0, mut c1) = ((x0 - 0.5).ceil() as i64, (x1 - 0.5).floor() as i64);
        if let Some((h, w)) = bounds {
            r0 = r0.max(0);
            c0 = c0.max(0);
            r1 = r1.min(h as i64 - 1);
            c1 = c1.min(w as i64 - 1);
        }
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                if self.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// True when no two non-adjacent edges properly cross or overlap.
    pub fn is_simple(&self) -> bool {
        is_simple(&self.vertices)
    }
}

fn shoelace(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = v[i];
        let (x1, y1) = v[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    s * 0.5
}

fn point_in_polygon(v: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = v.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = v[i];
        let (xj, yj) = v[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_conflict(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    // Collinear overlap of positive length.
    if o1 == 0.0 && o2 == 0.0 {
        let overlap = [c, d].iter().filter(|&&p| on_segment(a, b, p) && p != a && p != b).count()
            + [a, b].iter().filter(|&&p| on_segment(c, d, p) && p != c && p != d).count();
        return overlap > 0;
    }
    false
}

fn is_simple(v: &[(f64, f64)]) -> bool {
    let n = v.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        for j in i + 1..n {
            if j == i || (j + 1) % n == i || j == (i + 1) % n {
                continue;
            }
            let (c, d) = (v[j], v[(j + 1) % n]);
            if segments_conflict(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// A set of building footprints over one AOI's time series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FootprintSet {
    pub polygons: Vec<Footprint>,
}

impl FootprintSet {
    pub fn new(polygons: Vec<Footprint>) -> Self {
        Self { polygons }
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn len(&self) -> usize {
        self.polygons.len()
    }

    /// Check simplicity, minimum area, unique ids and appearance range.
    pub fn validate(&self, series_len: usize, min_area: f64) -> Result<()> {
        let mut ids = HashSet::new();
        for p in &self.polygons {
            if !ids.insert(p.building_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate building_id `{}`", p.building_id)));
            }
            if !p.is_simple() {
                return Err(Error::Invalid(format!("polygon `{}` is not simple", p.building_id)));
            }
            if p.area() <= min_area {
                return Err(Error::Invalid(format!("polygon `{}` area {} ≤ {min_area}", p.building_id, p.area())));
            }
            if p.appear_t >= series_len {
                return Err(Error::Invalid(format!(
                    "polygon `{}` appears at {} beyond series length {series_len}",
                    p.building_id, p.appear_t
                )));
            }
        }
        Ok(())
    }

    /// Footprints present at timestep `k` (those with `appear_t ≤ k`).
    pub fn active_at(&self, k: usize) -> impl Iterator<Item = &Footprint> {
        self.polygons.iter().filter(move |p| p.appear_t <= k)
    }

    /// Binary building mask at timestep `k`.
    pub fn mask_at(&self, k: usize, height: usize, width: usize) -> Array2<bool> {
        let mut m = Array2::from_elem((height, width), false);
        for p in self.active_at(k) {
            for (r, c) in p.pixels(Some((height, width))) {
                m[[r as usize, c as usize]] = true;
            }
        }
        m
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .polygons
            .iter()
            .map(|p| {
                let mut ring: Vec<[f64; 2]> = p.vertices.iter().map(|&(x, y)| [x, y]).collect();
                if let Some(&first) = ring.first() {
                    ring.push(first);
                }
                json!({
                    "type": "Feature",
                    "geometry": { "type": "Polygon", "coordinates": [ring] },
                    "properties": { "building_id": p.building_id, "appear_t": p.appear_t },
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn from_geojson(v: &Value) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("GeoJSON: {m}"));
        if v.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(bad("expected a FeatureCollection"));
        }
        let features = v.get("features").and_then(Value::as_array).ok_or_else(|| bad("missing features"))?;
        let mut polygons = Vec::with_capacity(features.len());
        for f in features {
            let props = f.get("properties").ok_or_else(|| bad("feature without properties"))?;
            let building_id = match props.get("building_id") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => return Err(bad("missing building_id")),
            };
            let appear_t = props
                .get("appear_t")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("missing appear_t"))? as usize;
            let geom = f.get("geometry").ok_or_else(|| bad("feature without geometry"))?;
            if geom.get("type").and_then(Value::as_str) != Some("Polygon") {
                return Err(bad("only Polygon geometries are supported"));
            }
            let ring = geom
                .get("coordinates")
                .and_then(Value::as_array)
                .and_then(|rings| rings.first())
                .and_then(Value::as_array)
                .ok_or_else(|| bad("polygon without outer ring"))?;
            let mut vertices = ring
                .iter()
                .map(|pt| {
                    let xy = pt.as_array().filter(|a| a.len() >= 2).ok_or_else(|| bad("malformed vertex"))?;
                    let x = xy[0].as_f64().ok_or_else(|| bad("non-numeric vertex"))?;
                    let y = xy[1].as_f64().ok_or_else(|| bad("non-numeric vertex"))?;
                    Ok((x, y))
                })
                .collect::<Result<Vec<_>>>()?;
            if vertices.len() > 1 && vertices.first() == vertices.last() {
                vertices.pop();
            }
            if vertices.len() < 3 {
                return Err(bad("polygon with fewer than three vertices"));
            }
            polygons.push(Footprint { building_id, vertices, appear_t });
        }
        Ok(Self { polygons })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_geojson())?;
        std::fs::write(path, text).map_err(|e| file_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| file_err(path, e))?;
        Self::from_geojson(&v).map_err(|e| file_err(path, e))
    }
}

/// Axis-aligned rectangle footprint covering pixel rows `[row, row+h)` and
/// columns `[col, col+w)`.
pub fn rect_footprint(id: &str, row: usize, col: usize, h: usize, w: usize, appear_t: usize) -> Footprint {
    let (x0, y0, x1, y1) = (col as f64, row as f64, (col + w) as f64, (row + h) as f64);
    Footprint {
        building_id: id.to_string(),
        vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
        appear_t,
    }
}
