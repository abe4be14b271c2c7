//! Sequence-consistent affine augmentation and synthetic next-frame
//! generation with analytic flow ground truth.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sample_bilinear, Tensor};
use crate::types::{FramePair, Mask};

/// A 2-D affine map `p -> linear * p + offset` in pixel coordinates
/// (`x` right, `y` down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        linear: [[1.0, 0.0], [0.0, 1.0]],
        offset: [0.0, 0.0],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let l = &self.linear;
        (
            l[0][0] * x + l[0][1] * y + self.offset[0],
            l[1][0] * x + l[1][1] * y + self.offset[1],
        )
    }

    pub fn apply_linear(&self, u: f64, v: f64) -> (f64, f64) {
        let l = &self.linear;
        (l[0][0] * u + l[0][1] * v, l[1][0] * u + l[1][1] * v)
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.linear;
        let det = a * d - b * c;
        assert!(det.abs() > 1e-12, "singular affine map");
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let ox = -(inv[0][0] * self.offset[0] + inv[0][1] * self.offset[1]);
        let oy = -(inv[1][0] * self.offset[0] + inv[1][1] * self.offset[1]);
        Affine {
            linear: inv,
            offset: [ox, oy],
        }
    }

    /// Rotation by `angle` (and uniform `scale`) about `center`, then
    /// translation by `shift`.
    pub fn rigid_about(center: (f64, f64), angle: f64, scale: f64, flip: bool, shift: (f64, f64)) -> Affine {
        let (s, c) = angle.sin_cos();
        let fx = if flip { -1.0 } else { 1.0 };
        // R * S * F, F mirrors x.
        let linear = [[scale * c * fx, -scale * s], [scale * s * fx, scale * c]];
        let (cx, cy) = center;
        let ox = cx + shift.0 - (linear[0][0] * cx + linear[0][1] * cy);
        let oy = cy + shift.1 - (linear[1][0] * cx + linear[1][1] * cy);
        Affine {
            linear,
            offset: [ox, oy],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// `(dx, dy)` in pixels.
    pub shift: (f64, f64),
    /// Radians.
    pub rotation: f64,
    pub flip_horizontal: bool,
    pub scale: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            shift: (0.0, 0.0),
            rotation: 0.0,
            flip_horizontal: false,
            scale: 1.0,
        }
    }
}

impl AffineParams {
    /// Forward map for an image of the given size; rotation, scale and flip
    /// act about the image center.
    pub fn matrix(&self, height: usize, width: usize) -> Affine {
        let center = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        Affine::rigid_about(center, self.rotation, self.scale, self.flip_horizontal, self.shift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineRanges {
    /// Maximum |shift| per axis as a fraction of the image side.
    pub shift_fraction: f64,
    /// Maximum |rotation| in radians.
    pub max_rotation: f64,
    pub flip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            shift_fraction: 0.1,
            max_rotation: 15f64.to_radians(),
            flip_probability: 0.5,
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self {
            shift_fraction: 0.0,
            max_rotation: 0.0,
            flip_probability: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.shift_fraction >= 0.0
            && self.max_rotation >= 0.0
            && (0.0..=1.0).contains(&self.flip_probability)
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("malformed affine ranges {self:?}")))
        }
    }
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Uniform draw within `ranges`; `size` is `(height, width)`.
pub fn sample_affine(rng: &mut impl Rng, ranges: &AffineRanges, size: (usize, usize)) -> AffineParams {
    let dx = symmetric(rng, ranges.shift_fraction * size.1 as f64);
    let dy = symmetric(rng, ranges.shift_fraction * size.0 as f64);
    let rotation = symmetric(rng, ranges.max_rotation);
    let flip_horizontal = ranges.flip_probability > 0.0 && rng.random_bool(ranges.flip_probability);
    let scale = if ranges.scale_max > ranges.scale_min {
        rng.random_range(ranges.scale_min..=ranges.scale_max)
    } else {
        ranges.scale_min
    };
    AffineParams {
        shift: (dx, dy),
        rotation,
        flip_horizontal,
        scale,
    }
}

#[inline]
fn nearest(v: f64, len: usize) -> Option<usize> {
    let r = (v + 0.5).floor();
    (r >= 0.0 && r < len as f64).then_some(r as usize)
}

/// Backward-warp an image through `forward`: output pixel `q` takes the
/// bilinear sample at `forward⁻¹(q)`, zero outside the source canvas.
pub fn warp_frame(frame: &Tensor, forward: &Affine) -> Tensor {
    let (c, h, w) = frame.dims3();
    let inv = forward.inverse();
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for ch in 0..c {
                if let Some(v) = sample_bilinear(frame.channel(ch), h, w, sx, sy) {
                    out.set(ch, y, x, v);
                }
            }
        }
    }
    out
}

/// Nearest-neighbour mask warp; background outside the source canvas.
pub fn warp_mask(mask: &Mask, forward: &Affine) -> Mask {
    let (h, w) = mask.shape();
    let inv = forward.inverse();
    Mask::from_fn(h, w, |y, x| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        match (nearest(sx, w), nearest(sy, h)) {
            (Some(px), Some(py)) => mask.get(py, px),
            _ => false,
        }
    })
}

/// Warp a flow field that lives on frames being transformed by `forward`.
/// Vectors are mapped by the linear part; pixels sourced from outside the
/// canvas become invalid.
pub fn warp_flow(flow: &Tensor, valid: Option<&Mask>, forward: &Affine) -> (Tensor, Mask) {
    let (_, h, w) = flow.dims3();
    let inv = forward.inverse();
    let mut out = Tensor::zeros(&[2, h, w]);
    let mut out_valid = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if let (Some(px), Some(py)) = (nearest(sx, w), nearest(sy, h)) {
                let (u, v) = forward.apply_linear(flow.at(0, py, px), flow.at(1, py, px));
                out.set(0, y, x, u);
                out.set(1, y, x, v);
                out_valid.set(y, x, valid.is_none_or(|m| m.get(py, px)));
            }
        }
    }
    (out, out_valid)
}

/// Apply one affine transform to every frame and mask of a sequence.
pub fn apply_affine_sequence(frames: &[Tensor], masks: &[Mask], params: &AffineParams) -> (Vec<Tensor>, Vec<Mask>) {
    let Some(first) = frames.first() else {
        return (Vec::new(), masks.to_vec());
    };
    let (h, w) = first.spatial();
    let m = params.matrix(h, w);
    let frames = frames.iter().map(|f| warp_frame(f, &m)).collect();
    let masks = masks.iter().map(|k| warp_mask(k, &m)).collect();
    (frames, masks)
}

/// Apply one affine transform to both frames and all ground truth of a pair.
pub fn apply_affine_pair(pair: &FramePair, params: &AffineParams) -> FramePair {
    let (h, w) = pair.spatial();
    let m = params.matrix(h, w);
    let (flow_gt, flow_valid) = match &pair.flow_gt {
        Some(f) => {
            let (f2, v2) = warp_flow(f, pair.flow_valid.as_ref(), &m);
            (Some(f2), Some(v2))
        }
        None => (None, pair.flow_valid.as_ref().map(|v| warp_mask(v, &m))),
    };
    FramePair {
        frame_t: warp_frame(&pair.frame_t, &m),
        frame_t1: warp_frame(&pair.frame_t1, &m),
        mask_gt: pair.mask_gt.as_ref().map(|k| warp_mask(k, &m)),
        flow_gt,
        flow_valid,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    /// `(dx, dy)` object displacement in pixels.
    pub object_displacement: (f64, f64),
    /// Object rotation about its centroid, radians.
    pub object_rotation: f64,
    /// Mark pixels whose forward target is occluded (or leaves the canvas)
    /// as invalid instead of keeping the whole field valid.
    pub exclude_occluded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisRanges {
    /// Maximum |displacement| per axis as a fraction of the image side.
    pub displacement_fraction: f64,
    pub max_rotation: f64,
}

impl Default for SynthesisRanges {
    fn default() -> Self {
        Self {
            displacement_fraction: 0.05,
            max_rotation: 5f64.to_radians(),
        }
    }
}

pub fn sample_synthesis(rng: &mut impl Rng, ranges: &SynthesisRanges, size: (usize, usize)) -> SynthesisParams {
    SynthesisParams {
        object_displacement: (
            symmetric(rng, ranges.displacement_fraction * size.1 as f64),
            symmetric(rng, ranges.displacement_fraction * size.0 as f64),
        ),
        object_rotation: symmetric(rng, ranges.max_rotation),
        exclude_occluded: false,
    }
}

fn centroid(mask: &Mask) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

/// The rigid object motion `params` describes for `mask`.
pub fn object_motion(mask: &Mask, params: &SynthesisParams) -> Result<Affine> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(Affine::rigid_about(centroid(mask), params.object_rotation, 1.0, false, params.object_displacement))
}

/// Move the masked object to fabricate a next frame. The area the object
/// vacates and does not re-cover is left black. The returned flow maps
/// frame pixels forward: object displacement inside the mask, zero on the
/// background.
pub fn synthesize_next_frame(frame: &Tensor, mask: &Mask, params: &SynthesisParams) -> Result<(Tensor, Tensor, Mask)> {
    let (c, h, w) = frame.dims3();
    if mask.shape() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} vs frame {:?}", mask.shape(), (h, w))));
    }
    let motion = object_motion(mask, params)?;
    let inv = motion.inverse();

    let mut next = frame.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                for ch in 0..c {
                    next.set(ch, y, x, 0.0);
                }
            }
        }
    }
    let mut covered = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let inside = matches!((nearest(sx, w), nearest(sy, h)), (Some(px), Some(py)) if mask.get(py, px));
            if !inside {
                continue;
            }
            covered.set(y, x, true);
            let (cx, cy) = (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64));
            for ch in 0..c {
                let v = sample_bilinear(frame.channel(ch), h, w, cx, cy).expect("clamped sample");
                next.set(ch, y, x, v);
            }
        }
    }

    let mut flow = Tensor::zeros(&[2, h, w]);
    let mut valid = Mask::filled(h, w, true);
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = if mask.get(y, x) {
                let (tx, ty) = motion.apply(x as f64, y as f64);
                flow.set(0, y, x, tx - x as f64);
                flow.set(1, y, x, ty - y as f64);
                (tx, ty)
            } else {
                (x as f64, y as f64)
            };
            if params.exclude_occluded {
                let visible = match (nearest(tx, w), nearest(ty, h)) {
                    (Some(px), Some(py)) => mask.get(y, x) || !covered.get(py, px),
                    _ => false,
                };
                valid.set(y, x, visible);
            }
        }
    }
    Ok((next, flow, valid))
}

/// Which augmentation stages [`augment_dataset`] runs, and their ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOptions {
    pub affine: AffineRanges,
    pub synthesis: SynthesisRanges,
    /// Affine augmentation of the frame and mask.
    pub segmentation: bool,
    /// Synthetic next frame; without it the pair repeats the frame with zero flow.
    pub flow: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            affine: AffineRanges::default(),
            synthesis: SynthesisRanges::default(),
            segmentation: true,
            flow: true,
        }
    }
}

const MAX_EMPTY_RETRIES: usize = 32;

/// Expand one annotated frame into `n_samples` training pairs carrying mask,
/// flow and flow-validity ground truth. Each sample draws from its own
/// stream seeded by `rng`.
pub fn augment_dataset(frame: &Tensor, mask: &Mask, n_samples: usize, rng: &mut impl RngCore, options: &AugmentOptions) -> Result<Vec<FramePair>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    options.affine.validate()?;
    let size = frame.spatial();
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let (f, m) = if options.segmentation {
            let mut attempt = 0;
            loop {
                let params = sample_affine(&mut sample_rng, &options.affine, size);
                let (mut fs, mut ms) = apply_affine_sequence(std::slice::from_ref(frame), std::slice::from_ref(mask), &params);
                let m = ms.pop().expect("one mask");
                if !m.is_empty() {
                    break (fs.pop().expect("one frame"), m);
                }
                attempt += 1;
                if attempt == MAX_EMPTY_RETRIES {
                    return Err(Error::EmptyMask);
                }
            }
        } else {
            (frame.clone(), mask.clone())
        };
        let (next, flow, valid) = if options.flow {
            let params = sample_synthesis(&mut sample_rng, &options.synthesis, size);
            synthesize_next_frame(&f, &m, &params)?
        } else {
            (f.clone(), Tensor::zeros(&[2, size.0, size.1]), Mask::filled(size.0, size.1, true))
        };
        out.push(FramePair {
            frame_t: f,
            frame_t1: next,
            mask_gt: Some(m),
            flow_gt: Some(flow),
            flow_valid: Some(valid),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            &[3, h, w],
            (0..3 * h * w).map(|i| 0.5 + 0.4 * ((i % w) as f64 * 0.9 + (i / w) as f64 * 1.7).sin()).collect(),
        )
    }

    fn square_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| y >= y0 && y < y0 + side && x >= x0 && x < x0 + side)
    }

    #[test]
    fn zero_width_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_affine(&mut rng, &AffineRanges::identity(), (32, 32));
        assert_eq!(p, AffineParams::default());
        assert_eq!(p.matrix(32, 32), Affine::IDENTITY);
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let ranges = AffineRanges::default();
        let a = sample_affine(&mut ChaCha8Rng::seed_from_u64(9), &ranges, (64, 64));
        let b = sample_affine(&mut ChaCha8Rng::seed_from_u64(9), &ranges, (64, 64));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = sample_affine(&mut rng, &ranges, (64, 48));
            assert!(p.shift.0.abs() <= 4.8 && p.shift.1.abs() <= 6.4);
            assert!(p.rotation.abs() <= ranges.max_rotation);
            assert!((ranges.scale_min..=ranges.scale_max).contains(&p.scale));
        }
    }

    #[test]
    fn identity_params_leave_sequence_unchanged() {
        let frames = vec![textured(16, 16), textured(16, 16)];
        let masks = vec![square_mask(16, 16, 4, 4, 5); 2];
        let (f2, m2) = apply_affine_sequence(&frames, &masks, &AffineParams::default());
        assert_eq!(f2, frames);
        assert_eq!(m2, masks);
    }

    #[test]
    fn double_flip_restores_sequence() {
        let frames = vec![textured(12, 10)];
        let masks = vec![square_mask(12, 10, 2, 1, 4)];
        let flip = AffineParams {
            flip_horizontal: true,
            ..AffineParams::default()
        };
        let (f1, m1) = apply_affine_sequence(&frames, &masks, &flip);
        assert_eq!(m1[0], masks[0].flip_horizontal());
        let (f2, m2) = apply_affine_sequence(&f1, &m1, &flip);
        assert_eq!(m2, masks);
        for (a, b) in f2[0].data().iter().zip(frames[0].data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_inverse_round_trips() {
        let m = AffineParams {
            shift: (3.0, -2.5),
            rotation: 0.3,
            flip_horizontal: true,
            scale: 1.04,
        }
        .matrix(20, 30);
        let (x, y) = m.inverse().apply(7.0, 11.0);
        let (bx, by) = m.apply(x, y);
        assert!((bx - 7.0).abs() < 1e-12 && (by - 11.0).abs() < 1e-12);
    }

    #[test]
    fn zero_motion_synthesis_is_identity() {
        let frame = textured(16, 16);
        let mask = square_mask(16, 16, 4, 4, 6);
        let (next, flow, valid) = synthesize_next_frame(&frame, &mask, &SynthesisParams::default()).unwrap();
        assert_eq!(next, frame);
        assert!(flow.data().iter().all(|&v| v == 0.0));
        assert_eq!(valid.count(), 256);
    }

    #[test]
    fn translated_square_leaves_black_strip() {
        let frame = textured(16, 16);
        let mask = square_mask(16, 16, 4, 4, 6);
        let params = SynthesisParams {
            object_displacement: (3.0, 0.0),
            ..SynthesisParams::default()
        };
        let (next, flow, _) = synthesize_next_frame(&frame, &mask, &params).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let inside = mask.get(y, x);
                assert_eq!(flow.at(0, y, x), if inside { 3.0 } else { 0.0 });
                assert_eq!(flow.at(1, y, x), 0.0);
                let vacated = (4..10).contains(&y) && (4..7).contains(&x);
                let moved = (4..10).contains(&y) && (7..13).contains(&x);
                for c in 0..3 {
                    if vacated {
                        assert_eq!(next.at(c, y, x), 0.0);
                    } else if moved {
                        assert_eq!(next.at(c, y, x), frame.at(c, y, x - 3));
                    } else {
                        assert_eq!(next.at(c, y, x), frame.at(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn strict_validity_excludes_covered_background() {
        let frame = textured(16, 16);
        let mask = square_mask(16, 16, 4, 4, 6);
        let params = SynthesisParams {
            object_displacement: (3.0, 0.0),
            exclude_occluded: true,
            ..SynthesisParams::default()
        };
        let (_, _, valid) = synthesize_next_frame(&frame, &mask, &params).unwrap();
        // background columns 10..13 of the object rows are now covered
        assert!(!valid.get(5, 11));
        assert!(valid.get(5, 5));
        assert!(valid.get(0, 0));
        assert_eq!(valid.count(), 256 - 18);
    }

    #[test]
    fn synthesis_rejects_empty_mask() {
        let r = synthesize_next_frame(&textured(8, 8), &Mask::new(8, 8), &SynthesisParams::default());
        assert!(matches!(r, Err(Error::EmptyMask)));
    }

    #[test]
    fn affine_pair_rotates_flow_vectors() {
        let mut flow = Tensor::zeros(&[2, 9, 9]);
        for v in flow.channel_mut(0) {
            *v = 1.0;
        }
        let mut pair = FramePair::new(textured(9, 9), textured(9, 9));
        pair.flow_gt = Some(flow);
        let flip = AffineParams {
            flip_horizontal: true,
            ..AffineParams::default()
        };
        let out = apply_affine_pair(&pair, &flip);
        let f = out.flow_gt.unwrap();
        assert!(f.channel(0).iter().all(|&u| u == -1.0));
        assert_eq!(out.flow_valid.unwrap().count(), 81);
    }

    #[test]
    fn augment_dataset_emits_valid_pairs() {
        let frame = textured(32, 32);
        let mask = square_mask(32, 32, 10, 10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = augment_dataset(&frame, &mask, 12, &mut rng, &AugmentOptions::default()).unwrap();
        assert_eq!(pairs.len(), 12);
        for p in &pairs {
            p.validate().unwrap();
            assert!(!p.mask_gt.as_ref().unwrap().is_empty());
        }
        assert!(augment_dataset(&frame, &mask, 0, &mut rng, &AugmentOptions::default()).is_err());
        assert!(matches!(
            augment_dataset(&frame, &Mask::new(32, 32), 1, &mut rng, &AugmentOptions::default()),
            Err(Error::EmptyMask)
        ));
    }
}
