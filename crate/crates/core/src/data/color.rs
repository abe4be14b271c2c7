//! Flow visualisation on an HSV color wheel: hue is the flow direction,
//! saturation the magnitude relative to `max_magnitude`, value is 1. Zero
//! flow is white.

use std::f64::consts::PI;

use image::RgbImage;

use crate::data::flo::FlowField;

/// Per-pixel `(hue in [0, 2π), saturation in [0, 1])`.
pub fn flow_to_hsv(field: &FlowField, max_magnitude: Option<f64>) -> Vec<(f64, f64)> {
    let mags: Vec<f64> = field
        .u
        .iter()
        .zip(&field.v)
        .map(|(&u, &v)| f64::from(u).hypot(f64::from(v)))
        .collect();
    let max = max_magnitude.unwrap_or_else(|| mags.iter().copied().fold(0.0, f64::max));
    let max = if max > 0.0 { max } else { 1.0 };
    field
        .u
        .iter()
        .zip(&field.v)
        .zip(&mags)
        .map(|((&u, &v), &m)| {
            let hue = f64::from(v).atan2(f64::from(u)).rem_euclid(2.0 * PI);
            (hue, (m / max).min(1.0))
        })
        .collect()
}

fn hsv_to_rgb(hue: f64, sat: f64) -> [u8; 3] {
    let h = hue / (PI / 3.0);
    let sector = h.floor();
    let f = h - sector;
    let (p, q, t) = (1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f));
    let (r, g, b) = match sector as i64 % 6 {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    let to8 = |c: f64| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

/// Render a flow field; `None` scales by the field's largest magnitude.
pub fn flow_to_color(field: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let hsv = flow_to_hsv(field, max_magnitude);
    let mut img = RgbImage::new(field.width as u32, field.height as u32);
    for (i, (hue, sat)) in hsv.into_iter().enumerate() {
        let (x, y) = (i % field.width, i / field.width);
        img.put_pixel(x as u32, y as u32, image::Rgb(hsv_to_rgb(hue, sat)));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(u: Vec<f32>, v: Vec<f32>) -> FlowField {
        FlowField {
            width: u.len(),
            height: 1,
            u,
            v,
        }
    }

    #[test]
    fn zero_field_is_white() {
        let img = flow_to_color(&FlowField::zeros(4, 3), None);
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn opposite_vectors_have_complementary_hues() {
        let f = field(vec![1.0, -0.3, 0.0, 2.0], vec![0.5, 2.0, -1.0, -2.0]);
        let g = field(f.u.iter().map(|x| -x).collect(), f.v.iter().map(|x| -x).collect());
        for ((ha, sa), (hb, sb)) in flow_to_hsv(&f, None).into_iter().zip(flow_to_hsv(&g, None)) {
            let d = (hb - ha).rem_euclid(2.0 * PI);
            assert!((d - PI).abs() < 1e-9);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn scaling_magnitude_keeps_hue() {
        let f = field(vec![1.0, -0.3, 0.25, 2.0], vec![0.5, 2.0, -1.0, -2.0]);
        let g = field(f.u.iter().map(|x| x * 3.5).collect(), f.v.iter().map(|x| x * 3.5).collect());
        let ha: Vec<f64> = flow_to_hsv(&f, None).iter().map(|p| p.0).collect();
        let hb: Vec<f64> = flow_to_hsv(&g, None).iter().map(|p| p.0).collect();
        for (a, b) in ha.iter().zip(&hb) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn primary_directions() {
        let img = flow_to_color(&field(vec![1.0, 0.0], vec![0.0, 0.0]), Some(1.0));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 255, 255]);
    }
}
