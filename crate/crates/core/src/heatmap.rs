//! Joint coordinates ⇄ per-joint heatmaps.
//!
//! Pixel coordinates are continuous with pixel `i` covering `[i, i + 1)`.
//! A heatmap cell `(row, col)` maps back to the pixel position of its centre,
//! `((col + 0.5)·stride, (row + 0.5)·stride)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::pgm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian spread of encoded targets, in heatmap cells.
pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Joint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Joint { x, y, visible }
    }
}

/// `N×H×W` per-joint likelihood maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    values: Tensor,
    stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedJoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct DecodeOptions {
    /// Shift the argmax a quarter cell towards the higher neighbour.
    pub quarter_offset: bool,
}

impl HeatmapStack {
    pub fn new(values: Tensor, stride: usize) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::invalid(format!(
                "heatmaps must be N×H×W, got {:?}",
                values.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("heatmap stride must be positive"));
        }
        Ok(HeatmapStack { values, stride })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn n_joints(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, n: usize) -> &[f64] {
        let plane = self.height() * self.width();
        &self.values.data()[n * plane..(n + 1) * plane]
    }
}

/// Encodes joints as unit-peak Gaussians centred on the cell containing
/// each visible joint; invisible joints give all-zero channels.
pub fn encode_gaussian(
    joints: &[Joint],
    n_joints: usize,
    hm_size: usize,
    stride: usize,
    sigma: f64,
) -> Result<HeatmapStack> {
    if joints.len() != n_joints {
        return Err(Error::invalid(format!(
            "expected {n_joints} joints, got {}",
            joints.len()
        )));
    }
    if hm_size == 0 || stride == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "invalid heatmap geometry: size {hm_size}, stride {stride}, sigma {sigma}"
        )));
    }
    let plane = hm_size * hm_size;
    let mut data = vec![0.0; n_joints * plane];
    let denom = 2.0 * sigma * sigma;
    for (n, j) in joints.iter().enumerate() {
        if !j.visible {
            continue;
        }
        let (cx, cy) = (cell_of(j.x, stride, hm_size), cell_of(j.y, stride, hm_size));
        let channel = &mut data[n * plane..(n + 1) * plane];
        for v in 0..hm_size {
            for u in 0..hm_size {
                let du = u as f64 - cx as f64;
                let dv = v as f64 - cy as f64;
                channel[v * hm_size + u] = (-(du * du + dv * dv) / denom).exp();
            }
        }
    }
    HeatmapStack::new(Tensor::new([n_joints, hm_size, hm_size], data)?, stride)
}

/// Heatmap cell index containing pixel coordinate `p`, clamped to the map.
pub fn cell_of(p: f64, stride: usize, hm_size: usize) -> usize {
    let c = (p / stride as f64).floor();
    if c <= 0.0 {
        0
    } else {
        (c as usize).min(hm_size - 1)
    }
}

/// Pixel coordinate of the centre of heatmap cell `c`.
pub fn cell_center(c: usize, stride: usize) -> f64 {
    (c as f64 + 0.5) * stride as f64
}

/// Per-channel argmax (first maximum in row-major order) mapped to the cell
/// centre in input pixels; the maximum value is the confidence.
pub fn decode_argmax(h: &HeatmapStack) -> Vec<DecodedJoint> {
    decode(h, DecodeOptions::default())
}

pub fn decode(h: &HeatmapStack, opts: DecodeOptions) -> Vec<DecodedJoint> {
    let (hh, ww, s) = (h.height(), h.width(), h.stride());
    (0..h.n_joints())
        .map(|n| {
            let ch = h.channel(n);
            let mut best = 0;
            for (i, &v) in ch.iter().enumerate() {
                if v > ch[best] {
                    best = i;
                }
            }
            let (row, col) = (best / ww, best % ww);
            let mut x = cell_center(col, s);
            let mut y = cell_center(row, s);
            if opts.quarter_offset {
                let at = |r: usize, c: usize| ch[r * ww + c];
                let quarter = 0.25 * s as f64;
                if col > 0 && col + 1 < ww {
                    x += quarter * sign(at(row, col + 1) - at(row, col - 1));
                }
                if row > 0 && row + 1 < hh {
                    y += quarter * sign(at(row + 1, col) - at(row - 1, col));
                }
            }
            DecodedJoint {
                x,
                y,
                confidence: ch[best],
            }
        })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mirrors every channel horizontally and swaps channels by `pair_map`,
/// which must be an involution over joint indices.
pub fn flip_heatmaps(h: &HeatmapStack, pair_map: &[usize]) -> Result<HeatmapStack> {
    let n = h.n_joints();
    if pair_map.len() != n || pair_map.iter().enumerate().any(|(i, &j)| j >= n || pair_map[j] != i) {
        return Err(Error::invalid("flip pair map is not an involution over the joints"));
    }
    let (hh, ww) = (h.height(), h.width());
    let plane = hh * ww;
    let src = h.values().data();
    let mut out = vec![0.0; src.len()];
    for (dst_ch, &src_ch) in pair_map.iter().enumerate() {
        for r in 0..hh {
            for c in 0..ww {
                out[dst_ch * plane + r * ww + c] = src[src_ch * plane + r * ww + (ww - 1 - c)];
            }
        }
    }
    HeatmapStack::new(Tensor::new(h.values().shape().to_vec(), out)?, h.stride())
}

/// Writes one 8-bit grey image per channel (`joint_XX.pgm`, values clamped to
/// `[0, 1]`) and `decoded.csv` with `joint,name,x,y,confidence` rows.
pub fn dump_heatmaps(h: &HeatmapStack, names: &[String], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (hh, ww) = (h.height(), h.width());
    for n in 0..h.n_joints() {
        let path = dir.join(format!("joint_{n:02}.pgm"));
        pgm::write_unit(&path, ww, hh, h.channel(n))?;
    }
    let mut csv = String::from("joint,name,x,y,confidence\n");
    for (n, d) in decode_argmax(h).iter().enumerate() {
        let name = names.get(n).map_or("", String::as_str);
        writeln!(csv, "{n},{name},{},{},{}", d.x, d.y, d.confidence).expect("string write");
    }
    let path = dir.join("decoded.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn centred_joint_profile() {
        // Joint at pixel (34, 34) → cell (8, 8) on a 16×16 map with stride 4.
        let h = encode_gaussian(&[Joint::new(34.0, 34.0, true)], 1, 16, 4, 2.0).unwrap();
        let at = |r: usize, c: usize| h.values().get(&[0, r, c]);
        assert_eq!(at(8, 8), 1.0);
        let expected = (-1.0f64 / 8.0).exp();
        for (r, c) in [(7, 8), (9, 8), (8, 7), (8, 9)] {
            assert!((at(r, c) - expected).abs() < 1e-15);
        }
        assert!((expected - 0.8825).abs() < 1e-4);
    }

    #[test]
    fn invisible_joint_is_zero() {
        let h = encode_gaussian(&[Joint::new(10.0, 10.0, false)], 1, 16, 4, 2.0).unwrap();
        assert_eq!(h.values().sum(), 0.0);
    }

    #[test]
    fn joint_count_mismatch() {
        assert!(encode_gaussian(&[Joint::new(1.0, 1.0, true)], 2, 16, 4, 2.0).is_err());
    }

    #[test]
    fn decode_single_cell() {
        let mut t = Tensor::zeros([1, 64, 64]);
        t.set(&[0, 10, 20], 0.7);
        let d = decode_argmax(&HeatmapStack::new(t, 4).unwrap());
        assert_eq!((d[0].x, d[0].y, d[0].confidence), (82.0, 42.0, 0.7));
    }

    #[test]
    fn decode_ties_pick_first_cell() {
        let zero = HeatmapStack::new(Tensor::zeros([1, 8, 8]), 4).unwrap();
        let d = decode_argmax(&zero)[0];
        assert_eq!((d.x, d.y, d.confidence), (2.0, 2.0, 0.0));
        let flat = HeatmapStack::new(Tensor::full([1, 8, 8], 0.3), 4).unwrap();
        let d = decode_argmax(&flat)[0];
        assert_eq!((d.x, d.y, d.confidence), (2.0, 2.0, 0.3));
    }

    #[test]
    fn round_trip_recovers_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let joints: Vec<Joint> = (0..1000)
            .map(|_| Joint::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0), true))
            .collect();
        for chunk in joints.chunks(16) {
            let h = encode_gaussian(chunk, chunk.len(), 16, 4, 2.0).unwrap();
            for (j, d) in chunk.iter().zip(decode_argmax(&h)) {
                assert_eq!(d.x, cell_center(cell_of(j.x, 4, 16), 4));
                assert_eq!(d.y, cell_center(cell_of(j.y, 4, 16), 4));
                assert_eq!(d.confidence, 1.0);
            }
        }
    }

    #[test]
    fn quarter_offset_moves_towards_higher_neighbour() {
        let mut t = Tensor::zeros([1, 8, 8]);
        t.set(&[0, 3, 3], 1.0);
        t.set(&[0, 3, 4], 0.5);
        t.set(&[0, 2, 3], 0.2);
        let h = HeatmapStack::new(t, 4).unwrap();
        let d = decode(&h, DecodeOptions { quarter_offset: true })[0];
        assert_eq!((d.x, d.y), (15.0, 13.0));
    }

    fn random_stack(rng: &mut ChaCha8Rng, n: usize) -> HeatmapStack {
        let t = Tensor::new([n, 6, 7], (0..n * 42).map(|_| rng.gen::<f64>()).collect()).unwrap();
        HeatmapStack::new(t, 4).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_stack(&mut rng, 4);
        let pairs = [3, 2, 1, 0];
        let twice = flip_heatmaps(&flip_heatmaps(&h, &pairs).unwrap(), &pairs).unwrap();
        assert_eq!(twice, h);
    }

    #[test]
    fn mirror_symmetric_stack_is_unchanged() {
        let mut t = Tensor::zeros([2, 3, 4]);
        for ch in 0..2 {
            for r in 0..3 {
                for c in 0..2 {
                    let v = (ch * 10 + r * 3 + c) as f64;
                    t.set(&[ch, r, c], v);
                    t.set(&[ch, r, 3 - c], v);
                }
            }
        }
        let h = HeatmapStack::new(t, 4).unwrap();
        assert_eq!(flip_heatmaps(&h, &[0, 1]).unwrap(), h);
    }

    #[test]
    fn decode_commutes_with_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = [1, 0, 2, 4, 3];
        for _ in 0..50 {
            let h = random_stack(&mut rng, 5);
            let width_px = (h.width() * h.stride()) as f64;
            let direct = decode_argmax(&h);
            let flipped = decode_argmax(&flip_heatmaps(&h, &pairs).unwrap());
            for (n, &src) in pairs.iter().enumerate() {
                assert_eq!(flipped[n].x, width_px - direct[src].x);
                assert_eq!(flipped[n].y, direct[src].y);
                assert_eq!(flipped[n].confidence, direct[src].confidence);
            }
        }
    }

    #[test]
    fn non_involution_pair_map_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_stack(&mut rng, 3);
        assert!(flip_heatmaps(&h, &[1, 2, 0]).is_err());
    }
}
