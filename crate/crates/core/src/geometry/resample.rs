use crate::ImagePlane;

/// Per-output-index source weights for box (area) resampling of `n` samples onto `m`.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Half-pixel-centred bilinear taps for resampling `n` samples onto `m`, replicate edges.
fn bilinear_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i = s.floor() as usize;
            let f = s - i as f64;
            if f == 0.0 || i + 1 >= n {
                vec![(i, 1.0)]
            } else {
                vec![(i, 1.0 - f), (i + 1, f)]
            }
        })
        .collect()
}

fn separable(img: &ImagePlane, rows: &[Vec<(usize, f64)>], cols: &[Vec<(usize, f64)>]) -> ImagePlane {
    let c = img.channels();
    let tmp = ImagePlane::from_fn(img.height(), cols.len(), c, |y, x, ch| {
        cols[x].iter().map(|&(i, w)| w * img.get(y, i, ch)).sum()
    });
    ImagePlane::from_fn(rows.len(), cols.len(), c, |y, x, ch| {
        rows[y].iter().map(|&(i, w)| w * tmp.get(i, x, ch)).sum()
    })
}

/// Box-filter resize: each output pixel averages the source area it covers.
pub fn area_resize(img: &ImagePlane, h: usize, w: usize) -> ImagePlane {
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    separable(img, &area_weights(img.height(), h), &area_weights(img.width(), w))
}

pub fn bilinear_resize(img: &ImagePlane, h: usize, w: usize) -> ImagePlane {
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    separable(img, &bilinear_weights(img.height(), h), &bilinear_weights(img.width(), w))
}

/// Rescales to height `h`, keeping the aspect ratio (area filter when
/// shrinking, bilinear when growing).
pub fn resize_to_height(img: &ImagePlane, h: usize) -> ImagePlane {
    if img.height() == h {
        return img.clone();
    }
    let w = ((img.width() as f64 * h as f64 / img.height() as f64).round() as usize).max(1);
    if h < img.height() {
        area_resize(img, h, w)
    } else {
        bilinear_resize(img, h, w)
    }
}
