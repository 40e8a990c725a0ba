use ndarray::ArrayView2;

/// 8-bit grayscale PNG of one slice, intensities mapped linearly from
/// `[lo, hi]` onto `[0, 255]` and clamped. Rows of the slice are image rows.
pub fn slice_png(slice: ArrayView2<'_, f32>, lo: f32, hi: f32) -> Result<Vec<u8>, png::EncodingError> {
    let (h, w) = slice.dim();
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let pixels: Vec<u8> = slice
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&pixels)?;
    }
    Ok(out)
}
