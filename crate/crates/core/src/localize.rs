//! Weakly supervised localization: class activation heatmaps from the
//! self-connection head, threshold segmentation, and bounding boxes.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::pnm::RawImage;
use crate::dataio::preprocess::bilinear_resize;
use crate::error::{Error, Result};
use crate::metrics::Bbox;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// A class activation map rendered onto the preprocessed image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub image_id: String,
    pub class_index: usize,
    /// Grid side length S (the preprocessed image side).
    pub side: usize,
    /// Row-major S x S values in [0, 255].
    pub values: Vec<u8>,
}

impl Heatmap {
    pub fn to_image(&self) -> RawImage {
        RawImage {
            width: self.side,
            height: self.side,
            channels: 1,
            pixels: self.values.clone(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::dataio::pnm::write_pnm(path, &self.to_image())
    }
}

/// Weighted sum of one image's transition maps by one row of the
/// self-connection head weight, bilinearly upsampled to `target_side` and
/// min-max normalized to [0, 255]; a constant raw map normalizes to zeros.
pub fn cam_heatmap<T: Real>(
    image_id: &str,
    maps: &Tensor<T>,
    weight: &Tensor<T>,
    class: usize,
    target_side: usize,
) -> Result<Heatmap> {
    let sm = maps.shape();
    if sm.len() != 3 || sm[1] != sm[2] {
        return Err(Error::shape(format!(
            "cam maps {:?} want [D, s, s]",
            sm
        )));
    }
    let (d, s) = (sm[0], sm[1]);
    let sw = weight.shape();
    if sw.len() != 2 || sw[1] != d {
        return Err(Error::shape(format!(
            "cam weight {:?} want [C, {}]",
            sw, d
        )));
    }
    if class >= sw[0] {
        return Err(Error::Config(format!(
            "class index {} out of range 0..{}",
            class, sw[0]
        )));
    }
    let md = maps.data();
    let wd = weight.data();
    let mut raw = vec![0.0f64; s * s];
    for ch in 0..d {
        let w = wd[class * d + ch].as_f64();
        if w == 0.0 {
            continue;
        }
        let plane = &md[ch * s * s..(ch + 1) * s * s];
        for (r, &m) in raw.iter_mut().zip(plane) {
            *r += w * m.as_f64();
        }
    }
    let up = bilinear_resize(&raw, s, s, target_side, target_side);
    let min = up.iter().copied().fold(f64::INFINITY, f64::min);
    let max = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        let scale = 255.0 / (max - min);
        up.iter()
            .map(|&v| ((v - min) * scale).round() as u8)
            .collect()
    } else {
        vec![0u8; target_side * target_side]
    };
    Ok(Heatmap {
        image_id: image_id.to_string(),
        class_index: class,
        side: target_side,
        values,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BoxOptions {
    /// Pixels with value strictly greater than this are activated.
    pub threshold: u8,
    /// Components with fewer activated pixels than this are dropped.
    pub min_area: usize,
    /// Merge all activated pixels into a single covering box.
    pub single_box: bool,
}

impl Default for BoxOptions {
    fn default() -> Self {
        BoxOptions {
            threshold: 180,
            min_area: 1,
            single_box: false,
        }
    }
}

/// A predicted box with its mean in-box heatmap value.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: Bbox,
    pub score: f64,
}

/// Segment `heatmap` at the threshold and wrap each 8-connected component
/// of activated pixels in an axis-aligned half-open box. Boxes come sorted
/// by area descending (ties by x_min, then y_min).
pub fn threshold_and_boxes(heatmap: &Heatmap, opts: &BoxOptions) -> Vec<ScoredBox> {
    let s = heatmap.side;
    let active = |x: usize, y: usize| heatmap.values[y * s + x] > opts.threshold;
    let mut seen = vec![false; s * s];
    let mut components: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    for y in 0..s {
        for x in 0..s {
            if !active(x, y) || seen[y * s + x] {
                continue;
            }
            let (mut min_x, mut max_x, mut min_y, mut max_y) = (x, x, y, y);
            let mut count = 0usize;
            let mut queue = VecDeque::new();
            queue.push_back((x, y));
            seen[y * s + x] = true;
            while let Some((cx, cy)) = queue.pop_front() {
                count += 1;
                min_x = min_x.min(cx);
                max_x = max_x.max(cx);
                min_y = min_y.min(cy);
                max_y = max_y.max(cy);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = cx as i64 + dx;
                        let ny = cy as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= s as i64 || ny >= s as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if active(nx, ny) && !seen[ny * s + nx] {
                            seen[ny * s + nx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            components.push((min_x, max_x, min_y, max_y, count));
        }
    }
    if opts.single_box {
        let mut merged: Option<(usize, usize, usize, usize, usize)> = None;
        for (min_x, max_x, min_y, max_y, count) in components {
            merged = Some(match merged {
                None => (min_x, max_x, min_y, max_y, count),
                Some((a, b, c, d, n)) => (
                    a.min(min_x),
                    b.max(max_x),
                    c.min(min_y),
                    d.max(max_y),
                    n + count,
                ),
            });
        }
        components = merged.into_iter().collect();
    }
    let mut boxes: Vec<ScoredBox> = components
        .into_iter()
        .filter(|&(_, _, _, _, count)| count >= opts.min_area)
        .map(|(min_x, max_x, min_y, max_y, _)| {
            let bbox = Bbox::new(
                min_x as f64,
                min_y as f64,
                (max_x + 1) as f64,
                (max_y + 1) as f64,
            )
            .expect("component bounds are nondegenerate");
            let score = box_mean(heatmap, min_x, max_x, min_y, max_y);
            ScoredBox { bbox, score }
        })
        .collect();
    boxes.sort_by(|a, b| {
        let area_a = a.bbox.area();
        let area_b = b.bbox.area();
        area_b
            .partial_cmp(&area_a)
            .unwrap()
            .then(a.bbox.x_min.partial_cmp(&b.bbox.x_min).unwrap())
            .then(a.bbox.y_min.partial_cmp(&b.bbox.y_min).unwrap())
    });
    boxes
}

fn box_mean(heatmap: &Heatmap, min_x: usize, max_x: usize, min_y: usize, max_y: usize) -> f64 {
    let s = heatmap.side;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            sum += heatmap.values[y * s + x] as f64;
            n += 1;
        }
    }
    sum / n as f64
}

/// One predicted box row of the localization CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictedBox {
    pub image_id: String,
    pub class_index: usize,
    pub bbox: Bbox,
    pub score: f64,
}

/// CSV: image_id,class_name,x,y,w,h,score.
pub fn write_pred_boxes(path: &Path, boxes: &[PredictedBox], class_names: &[String]) -> Result<()> {
    let mut out = String::from("image_id,class_name,x,y,w,h,score\n");
    for b in boxes {
        let name = class_names.get(b.class_index).ok_or_else(|| {
            Error::Validation(format!("class index {} has no name", b.class_index))
        })?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            b.image_id,
            name,
            b.bbox.x_min,
            b.bbox.y_min,
            b.bbox.width(),
            b.bbox.height(),
            b.score
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pred_boxes(path: &Path, class_names: &[String]) -> Result<Vec<PredictedBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Ingestion {
                row: i + 1,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let class_index = class_names
            .iter()
            .position(|n| n == fields[1])
            .ok_or_else(|| Error::Ingestion {
                row: i + 1,
                msg: format!("unknown class '{}'", fields[1]),
            })?;
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Ingestion {
                row: i + 1,
                msg: format!("bad {} '{}'", what, s),
            })
        };
        let x = parse(fields[2], "x")?;
        let y = parse(fields[3], "y")?;
        let w = parse(fields[4], "w")?;
        let h = parse(fields[5], "h")?;
        let score = parse(fields[6], "score")?;
        out.push(PredictedBox {
            image_id: fields[0].to_string(),
            class_index,
            bbox: Bbox::from_xywh(x, y, w, h)?,
            score,
        });
    }
    Ok(out)
}
