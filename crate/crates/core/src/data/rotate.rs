use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

/// Quarter turns for an angle that is an exact multiple of 90 degrees.
fn quarter_turns(angle_deg: f64) -> Option<usize> {
    let t = angle_deg / 90.0;
    (t.fract() == 0.0).then(|| t.rem_euclid(4.0) as usize)
}

/// Rotate a square `size x size` plane counter-clockwise (as displayed, rows
/// growing downward) about its center.
///
/// Multiples of 90 degrees are index permutations. Other angles sample the
/// inverse map bilinearly; points outside the grid take `fill`.
pub fn rotate_plane(src: &[f64], size: usize, angle_deg: f64, fill: f64) -> Vec<f64> {
    assert_eq!(src.len(), size * size, "plane is not square");
    if let Some(turns) = quarter_turns(angle_deg) {
        return quarter_turn_plane(src, size, turns);
    }
    let c = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let last = size as f64 - 1.0;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            // y axis points up; sample the source at R(-angle) applied to this pixel.
            let x = j as f64 - c;
            let y = c - i as f64;
            let xs = x * cos + y * sin;
            let ys = -x * sin + y * cos;
            let (col, row) = (c + xs, c - ys);
            if !(0.0..=last).contains(&col) || !(0.0..=last).contains(&row) {
                out.push(fill);
                continue;
            }
            let (r0, c0) = (row.floor() as usize, col.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(size - 1), (c0 + 1).min(size - 1));
            let (fr, fc) = (row - r0 as f64, col - c0 as f64);
            let top = src[r0 * size + c0] * (1.0 - fc) + src[r0 * size + c1] * fc;
            let bottom = src[r1 * size + c0] * (1.0 - fc) + src[r1 * size + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

fn quarter_turn_plane<V: Copy>(src: &[V], size: usize, turns: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (r, c) = match turns {
                0 => (i, j),
                1 => (j, size - 1 - i),
                2 => (size - 1 - i, size - 1 - j),
                _ => (size - 1 - j, i),
            };
            out.push(src[r * size + c]);
        }
    }
    out
}

/// Rotate a `[C, S, S]` image; `fill` holds one value per channel.
pub fn rotate_image(img: &Tensor<f32>, angle_deg: f64, fill: &[f32]) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Argument(format!(
            "expected a [C, S, S] image, got {:?}",
            img.shape()
        )));
    };
    if h != w {
        return Err(Error::Argument(format!("rotation needs a square image, got {h}x{w}")));
    }
    if fill.len() != c {
        return Err(Error::Argument(format!("{} fill values for {c} channels", fill.len())));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(img.numel());
    if let Some(turns) = quarter_turns(angle_deg) {
        for ch in img.data().chunks_exact(plane) {
            out.extend(quarter_turn_plane(ch, h, turns));
        }
    } else {
        for (ch, &f) in img.data().chunks_exact(plane).zip(fill) {
            let src: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
            out.extend(rotate_plane(&src, h, angle_deg, f as f64).into_iter().map(|v| v as f32));
        }
    }
    Tensor::new(img.shape(), out)
}

/// Quarter-turn every image of an `[N, C, S, S]` batch counter-clockwise `turns` times.
pub fn rot90_batch(x: &Tensor<f32>, turns: usize) -> Result<Tensor<f32>> {
    let &[_, _, h, w] = x.shape() else {
        return Err(Error::Argument(format!("expected NCHW, got {:?}", x.shape())));
    };
    if h != w {
        return Err(Error::Argument(format!("rotation needs square planes, got {h}x{w}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks_exact(h * w) {
        out.extend(quarter_turn_plane(plane, h, turns % 4));
    }
    Tensor::new(x.shape(), out)
}
