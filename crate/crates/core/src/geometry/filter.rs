use crate::{ImagePlane, Result};

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicate-edge padding; `σ = 0` returns the input.
pub fn lowpass(image: &ImagePlane, sigma: f64) -> ImagePlane {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be a finite non-negative number");
    if sigma == 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = image.dims();
    let horiz = ImagePlane::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * image.get_clamped(y as isize, x as isize + i as isize - r, ch))
            .sum()
    });
    ImagePlane::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.get_clamped(y as isize + i as isize - r, x as isize, ch))
            .sum()
    })
}

/// `LPF(f) + (g − LPF(g))`, clamped: keeps the restorer's detail on the
/// background upscaler's low frequencies.
pub fn blend_crop(g_crop: &ImagePlane, f_crop: &ImagePlane, sigma: f64) -> Result<ImagePlane> {
    g_crop.ensure_same_shape(f_crop)?;
    let lf = lowpass(f_crop, sigma);
    let lg = lowpass(g_crop, sigma);
    let (h, w, c) = g_crop.dims();
    let data = (0..h * w * c)
        .map(|i| (lf.data()[i] + g_crop.data()[i] - lg.data()[i]).clamp(-1.0, 1.0))
        .collect();
    ImagePlane::new(h, w, c, data)
}
