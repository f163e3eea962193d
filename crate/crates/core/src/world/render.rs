//! Procedural face renderer.
//!
//! Faces are composed of analytic ellipses (head, eyes, lips, mouth cavity,
//! teeth) painted back-to-front with ~1 px anti-aliasing. All geometry is
//! expressed in a face-local frame; a rigid head pose (translation, rotation,
//! scale) maps it into the image. Because the scene is analytic, tests can
//! compute exact oracles: a closed mouth renders zero dark inner-mouth
//! pixels, mouth-pose changes touch only the lips region, and masks shift
//! exactly under integer head translations.

use crate::error::{Error, Result};
use crate::tensor::Array;
use crate::world::audio::GroundTruthPose;
use crate::world::identity::IdentitySpec;
use serde::{Deserialize, Serialize};

/// Brightness below which a pixel inside the mouth region counts as open
/// mouth interior (cavity ~0.06, lips ≥ 0.35, teeth ≥ 0.78, skin ≥ 0.6).
pub const INNER_MOUTH_THRESH: f32 = 0.25;

/// Margin (pixels, face frame) added around the analytic mouth bounds when
/// building the lips mask.
const LIPS_BOX_MARGIN: f32 = 3.0;

/// Rigid head pose applied to the face-local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    /// Translation in pixels (x right, y down).
    pub tx: f32,
    pub ty: f32,
    /// Rotation in radians.
    pub rot: f32,
    /// Isotropic scale.
    pub scale: f32,
}

impl HeadPose {
    pub const IDENTITY: HeadPose = HeadPose { tx: 0.0, ty: 0.0, rot: 0.0, scale: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.tx.abs() <= 6.0 && self.ty.abs() <= 6.0) {
            return Err(Error::invalid(format!(
                "head translation ({}, {}) outside +-6 px",
                self.tx, self.ty
            )));
        }
        if self.rot.abs() > 0.1 {
            return Err(Error::invalid(format!("head rotation {} outside +-0.1 rad", self.rot)));
        }
        if !(0.9..=1.1).contains(&self.scale) {
            return Err(Error::invalid(format!("head scale {} outside [0.9, 1.1]", self.scale)));
        }
        Ok(())
    }

    /// Head-pose conditioning vector, zero-padded to `d_p`.
    pub fn vector(&self, d_p: usize) -> Result<Vec<f32>> {
        if d_p < 4 {
            return Err(Error::invalid(format!("head pose vector needs d_p >= 4, got {d_p}")));
        }
        let mut v = vec![0.0; d_p];
        v[0] = self.tx;
        v[1] = self.ty;
        v[2] = self.rot;
        v[3] = self.scale;
        Ok(v)
    }
}

/// Scene options independent of identity and pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Uniform background gray level.
    pub background: f32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: 0.2 }
    }
}

/// Anti-aliased coverage of the ellipse (x/a)^2 + (y/b)^2 <= 1, using a
/// first-order Euclidean distance estimate for a ~1 px soft edge.
fn ellipse_alpha(x: f32, y: f32, a: f32, b: f32) -> f32 {
    if a <= 1e-6 || b <= 1e-6 {
        return 0.0;
    }
    let f = (x / a) * (x / a) + (y / b) * (y / b);
    let sf = f.sqrt();
    let grad = ((x / (a * a)) * (x / (a * a)) + (y / (b * b)) * (y / (b * b))).sqrt();
    let d = if grad > 1e-9 { (sf - 1.0) * sf / grad } else { -a.min(b) };
    (0.5 - d).clamp(0.0, 1.0)
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Mouth geometry in the face frame, derived from identity and mouth pose.
struct MouthGeom {
    /// Vertical center of the mouth.
    cy: f32,
    /// Outer (lips) half-width.
    half_w: f32,
    /// Inner (opening) half-width.
    inner_w: f32,
    /// Inner opening half-height; exactly 0 for a closed mouth.
    inner_h: f32,
    /// Outer half-height (inner + lip thickness).
    outer_h: f32,
    /// Corner curl coefficient (y-offset = curl_k * (x/half_w)^2).
    curl_k: f32,
    teeth_vis: f32,
}

const LIP_THICKNESS: f32 = 1.8;

fn mouth_geom(id: &IdentitySpec, pose: &GroundTruthPose) -> MouthGeom {
    let (semi_w, _semi_h) = id.face_axes;
    let half_w = semi_w * (0.34 + 0.20 * pose.width);
    let inner_h = pose.openness * (2.4 + 1.0 * pose.jaw_drop);
    MouthGeom {
        cy: id.jaw_base + 2.0 * pose.jaw_drop,
        half_w,
        inner_w: (half_w - 1.6).max(0.1),
        inner_h,
        outer_h: inner_h + LIP_THICKNESS,
        curl_k: 2.2 * pose.corner_curl,
        teeth_vis: smoothstep(0.2, 0.4, pose.openness),
    }
}

/// Face-frame bounds of the lips region: pose-independent (covers the mouth
/// under every valid mouth pose), so masks never depend on the mouth state.
/// Returns (half_width, y_top, y_bottom) before the mask margin.
fn mouth_box(id: &IdentitySpec) -> (f32, f32, f32) {
    let (semi_w, _) = id.face_axes;
    (semi_w * 0.54, id.jaw_base - 7.4, id.jaw_base + 10.2)
}

#[inline]
/// Map a pixel position into the face's own frame: undo translation and
/// rotation, then divide by the head scale.
pub fn face_coords(px: f32, py: f32, center: f32, head: &HeadPose) -> (f32, f32) {
    let qx = px - center - head.tx;
    let qy = py - center - head.ty;
    let (s, c) = head.rot.sin_cos();
    ((c * qx + s * qy) / head.scale, (-s * qx + c * qy) / head.scale)
}

#[inline]
fn mix(dst: &mut [f32; 3], src: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d = alpha * s + (1.0 - alpha) * *d;
    }
}

/// Render a face image as an RGB array of shape [3, s, s] with values in [0,1].
pub fn render_face(
    id: &IdentitySpec,
    pose: &GroundTruthPose,
    head: &HeadPose,
    opts: &RenderOptions,
) -> Result<Array<f32>> {
    pose.validate()?;
    head.validate()?;
    let s = id.image_size;
    let center = s as f32 / 2.0 - 0.5;
    let (semi_w, semi_h) = id.face_axes;
    let geom = mouth_geom(id, pose);
    let cavity = [0.08, 0.05, 0.05];
    let teeth = [id.teeth_brightness, id.teeth_brightness, id.teeth_brightness * 0.96];
    let eye_color = [0.09, 0.07, 0.07];
    let mut img = Array::zeros(&[3, s, s]);
    let data = img.data_mut();
    for py in 0..s {
        for px in 0..s {
            let (fx, fy) = face_coords(px as f32, py as f32, center, head);
            let mut rgb = [opts.background; 3];
            mix(&mut rgb, id.skin_tone, ellipse_alpha(fx, fy, semi_w, semi_h));
            let r = id.eye_params.radius;
            mix(
                &mut rgb,
                eye_color,
                ellipse_alpha(fx - id.eye_params.dx, fy + id.eye_params.dy, r, r),
            );
            mix(
                &mut rgb,
                eye_color,
                ellipse_alpha(fx + id.eye_params.dx, fy + id.eye_params.dy, r, r),
            );
            // Mouth: outer lips, then cavity, then the upper teeth band.
            let yy = fy - geom.cy + geom.curl_k * (fx / geom.half_w) * (fx / geom.half_w);
            mix(&mut rgb, id.lip_color, ellipse_alpha(fx, yy, geom.half_w, geom.outer_h));
            if geom.inner_h > 1e-4 {
                let a_in = ellipse_alpha(fx, yy, geom.inner_w, geom.inner_h);
                mix(&mut rgb, cavity, a_in);
                let band = (0.5 + (-0.25 * geom.inner_h - yy)).clamp(0.0, 1.0);
                mix(&mut rgb, teeth, a_in * band * geom.teeth_vis);
            }
            let base = py * s + px;
            for (ch, &v) in rgb.iter().enumerate() {
                data[ch * s * s + base] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// Binary editing mask `m` (lower face half union lips box) and lips mask
/// `m_lips` (mouth bounding box + margin), each of shape [1, s, s] with
/// values in {0, 1}. Both depend only on identity and head pose, never on
/// the mouth pose, and `m_lips` is contained in `m` by construction.
pub fn make_masks(id: &IdentitySpec, head: &HeadPose) -> Result<(Array<f32>, Array<f32>)> {
    head.validate()?;
    let s = id.image_size;
    let center = s as f32 / 2.0 - 0.5;
    let (semi_w, semi_h) = id.face_axes;
    let (bw, by0, by1) = mouth_box(id);
    let (bw, by0, by1) = (bw + LIPS_BOX_MARGIN, by0 - LIPS_BOX_MARGIN, by1 + LIPS_BOX_MARGIN);
    let mut m = Array::zeros(&[1, s, s]);
    let mut m_lips = Array::zeros(&[1, s, s]);
    for py in 0..s {
        for px in 0..s {
            let (fx, fy) = face_coords(px as f32, py as f32, center, head);
            let idx = py * s + px;
            let in_box = fx.abs() <= bw && fy >= by0 && fy <= by1;
            if in_box {
                m_lips.data_mut()[idx] = 1.0;
            }
            let f = (fx / semi_w) * (fx / semi_w) + (fy / semi_h) * (fy / semi_h);
            if in_box || (f <= 1.0 && fy >= 0.0) {
                m.data_mut()[idx] = 1.0;
            }
        }
    }
    Ok((m, m_lips))
}

/// Count dark inner-mouth pixels: pixels inside both the face ellipse and the
/// lips box whose mean brightness falls below [`INNER_MOUTH_THRESH`]. This is
/// the openness oracle: exactly 0 for a closed mouth, growing as it opens.
/// It only needs the rendered (or decoded) image plus the identity and head
/// pose that produced it, so it applies to edited frames too.
pub fn inner_mouth_pixels(img: &Array<f32>, id: &IdentitySpec, head: &HeadPose) -> Result<usize> {
    let s = id.image_size;
    if img.shape() != [3, s, s] {
        return Err(Error::shape("inner_mouth_pixels", format!("expected [3, {s}, {s}], got {:?}", img.shape())));
    }
    let center = s as f32 / 2.0 - 0.5;
    let (semi_w, semi_h) = id.face_axes;
    let (bw, by0, by1) = mouth_box(id);
    let data = img.data();
    let mut count = 0;
    for py in 0..s {
        for px in 0..s {
            let (fx, fy) = face_coords(px as f32, py as f32, center, head);
            let f = (fx / semi_w) * (fx / semi_w) + (fy / semi_h) * (fy / semi_h);
            if f > 1.0 || fx.abs() > bw || fy < by0 || fy > by1 {
                continue;
            }
            let idx = py * s + px;
            let b = (data[idx] + data[s * s + idx] + data[2 * s * s + idx]) / 3.0;
            if b < INNER_MOUTH_THRESH {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Inclusive bounding box (y0, x0, y1, x1) of the nonzero pixels of a
/// [1, H, W] mask, or None for an all-zero mask.
pub fn mask_bbox(mask: &Array<f32>) -> Result<Option<(usize, usize, usize, usize)>> {
    if mask.shape().len() != 3 || mask.shape()[0] != 1 {
        return Err(Error::shape("mask_bbox", format!("expected [1, H, W], got {:?}", mask.shape())));
    }
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let data = mask.data();
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if data[y * w + x] != 0.0 {
                any = true;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    Ok(if any { Some((y0, x0, y1, x1)) } else { None })
}

/// Bilinear resize of a [C, H, W] image to [C, out_h, out_w].
pub fn bilinear_resize(img: &Array<f32>, out_h: usize, out_w: usize) -> Result<Array<f32>> {
    if img.shape().len() != 3 {
        return Err(Error::shape("bilinear_resize", format!("expected [C, H, W], got {:?}", img.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize: zero output size"));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array::zeros(&[c, out_h, out_w]);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let src = img.data();
    let dst = out.data_mut();
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let v = plane[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + plane[y0 * w + x1] * (1.0 - wy) * wx
                    + plane[y1 * w + x0] * wy * (1.0 - wx)
                    + plane[y1 * w + x1] * wy * wx;
                dst[ch * out_h * out_w + oy * out_w + ox] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::identity::synth_identity;

    fn pose(openness: f32) -> GroundTruthPose {
        GroundTruthPose { openness, width: 0.5, jaw_drop: 0.3, corner_curl: 0.2 }
    }

    #[test]
    fn closed_mouth_has_zero_inner_mouth_pixels() {
        for seed in 0..10 {
            let id = synth_identity(seed, 64);
            let head = HeadPose { tx: 1.0, ty: -2.0, rot: 0.05, scale: 1.03 };
            let img = render_face(&id, &pose(0.0), &head, &RenderOptions::default()).unwrap();
            assert_eq!(inner_mouth_pixels(&img, &id, &head).unwrap(), 0, "seed {seed}");
        }
    }

    #[test]
    fn opening_the_mouth_increases_dark_pixel_count() {
        for seed in 0..10 {
            let id = synth_identity(seed, 64);
            let head = HeadPose::IDENTITY;
            let opts = RenderOptions::default();
            let closed = render_face(&id, &pose(0.1), &head, &opts).unwrap();
            let open = render_face(&id, &pose(0.9), &head, &opts).unwrap();
            let n_closed = inner_mouth_pixels(&closed, &id, &head).unwrap();
            let n_open = inner_mouth_pixels(&open, &id, &head).unwrap();
            assert!(
                n_open > n_closed + 10,
                "seed {seed}: open {n_open} vs closed {n_closed}"
            );
        }
    }

    #[test]
    fn mouth_pose_changes_stay_inside_lips_mask() {
        for seed in 0..6 {
            let id = synth_identity(seed, 64);
            let head = HeadPose { tx: -1.0, ty: 2.0, rot: -0.04, scale: 0.97 };
            let opts = RenderOptions::default();
            let a = render_face(
                &id,
                &GroundTruthPose { openness: 0.0, width: 0.0, jaw_drop: 0.0, corner_curl: -1.0 },
                &head,
                &opts,
            )
            .unwrap();
            let b = render_face(
                &id,
                &GroundTruthPose { openness: 1.0, width: 1.0, jaw_drop: 1.0, corner_curl: 1.0 },
                &head,
                &opts,
            )
            .unwrap();
            let (_, m_lips) = make_masks(&id, &head).unwrap();
            let s = id.image_size;
            for y in 0..s {
                for x in 0..s {
                    let idx = y * s + x;
                    if m_lips.data()[idx] == 0.0 {
                        for ch in 0..3 {
                            assert_eq!(
                                a.data()[ch * s * s + idx],
                                b.data()[ch * s * s + idx],
                                "seed {seed}: pixel ({y},{x}) ch {ch} changed outside lips mask"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lips_mask_is_contained_in_edit_mask() {
        for seed in 0..10 {
            let id = synth_identity(seed, 64);
            let head = HeadPose { tx: 3.0, ty: 3.0, rot: 0.08, scale: 1.08 };
            let (m, m_lips) = make_masks(&id, &head).unwrap();
            for (a, b) in m_lips.data().iter().zip(m.data()) {
                assert!(*a <= *b);
            }
            let n_lips: f32 = m_lips.data().iter().sum();
            let n_m: f32 = m.data().iter().sum();
            assert!(n_lips > 50.0, "lips mask too small: {n_lips}");
            assert!(n_m > n_lips, "edit mask should extend beyond lips box");
        }
    }

    #[test]
    fn masks_shift_exactly_under_integer_translation() {
        let id = synth_identity(11, 64);
        let base = HeadPose::IDENTITY;
        let shifted = HeadPose { tx: 5.0, ty: 5.0, rot: 0.0, scale: 1.0 };
        let (m0, l0) = make_masks(&id, &base).unwrap();
        let (m1, l1) = make_masks(&id, &shifted).unwrap();
        let s = id.image_size;
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y as i64 - 5, x as i64 - 5);
                if sy < 0 || sx < 0 || sy >= s as i64 || sx >= s as i64 {
                    continue;
                }
                let (src, dst) = ((sy as usize) * s + sx as usize, y * s + x);
                assert_eq!(m1.data()[dst], m0.data()[src]);
                assert_eq!(l1.data()[dst], l0.data()[src]);
            }
        }
    }

    #[test]
    fn mask_areas_match_analytic_geometry() {
        let id = synth_identity(0, 64);
        let (m, m_lips) = make_masks(&id, &HeadPose::IDENTITY).unwrap();
        let lips_count: f32 = m_lips.data().iter().sum();
        let m_count: f32 = m.data().iter().sum();
        // Lips box: analytic rectangle area vs pixel count, within a
        // perimeter-sized pixelization slack.
        let (semi_w, semi_h) = id.face_axes;
        let bw = 2.0 * (semi_w * 0.54 + 3.0);
        let bh = 10.2 + 7.4 + 6.0;
        let perim = 2.0 * (bw + bh);
        assert!(
            (lips_count - bw * bh).abs() <= perim,
            "lips area {lips_count} vs analytic {}",
            bw * bh
        );
        // Edit mask: at least the lower half-ellipse, at most that plus the box.
        let half_ellipse = std::f32::consts::PI * semi_w * semi_h / 2.0;
        assert!(m_count >= half_ellipse - perim, "edit mask area {m_count} < {half_ellipse}");
        assert!(m_count <= half_ellipse + bw * bh + perim);
    }

    #[test]
    fn render_is_continuous_in_pose() {
        let id = synth_identity(4, 64);
        let opts = RenderOptions::default();
        let a = render_face(&id, &pose(0.500), &HeadPose::IDENTITY, &opts).unwrap();
        let b = render_face(&id, &pose(0.501), &HeadPose::IDENTITY, &opts).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 0.05, "1e-3 openness step moved a pixel by {max_diff}");
    }

    #[test]
    fn rendered_pixels_are_in_unit_range() {
        let id = synth_identity(5, 64);
        let img = render_face(&id, &pose(0.7), &HeadPose::IDENTITY, &RenderOptions::default())
            .unwrap();
        for &v in img.data() {
            assert!((0.0..=1.0).contains(&v) && v.is_finite());
        }
    }

    #[test]
    fn head_pose_validation_rejects_out_of_range_values() {
        assert!(HeadPose { tx: 9.0, ty: 0.0, rot: 0.0, scale: 1.0 }.validate().is_err());
        assert!(HeadPose { tx: 0.0, ty: 0.0, rot: 0.5, scale: 1.0 }.validate().is_err());
        assert!(HeadPose { tx: 0.0, ty: 0.0, rot: 0.0, scale: 1.5 }.validate().is_err());
        assert!(HeadPose { tx: 0.0, ty: 0.0, rot: 0.0, scale: 1.0 }.validate().is_ok());
        let v = HeadPose { tx: 1.0, ty: 2.0, rot: 0.05, scale: 1.02 }.vector(8).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 0.05, 1.02, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_resize_preserves_constant_images() {
        let img = Array::full(&[3, 16, 16], 0.37f32);
        let out = bilinear_resize(&img, 24, 24).unwrap();
        assert_eq!(out.shape(), [3, 24, 24]);
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
        let same = bilinear_resize(&img, 16, 16).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn mask_bbox_finds_nonzero_extent() {
        let mut m = Array::zeros(&[1, 8, 8]);
        m.data_mut()[2 * 8 + 3] = 1.0;
        m.data_mut()[5 * 8 + 6] = 1.0;
        assert_eq!(mask_bbox(&m).unwrap(), Some((2, 3, 5, 6)));
        assert_eq!(mask_bbox(&Array::zeros(&[1, 4, 4])).unwrap(), None);
    }
}
