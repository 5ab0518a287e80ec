use sigmine_core::corpus::SyntheticVolume;
use sigmine_core::{Error, Result, VoxelCoord};

/// Maps an intensity in [0, 1] to a byte, rounding half up.
pub fn to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { f64::from(v).clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// `size` x `size` bytes of the z slice through `center`, row-major in y.
/// Voxels outside the volume render as 0.
pub fn render_slice(volume: &SyntheticVolume, center: VoxelCoord, size: u32) -> Vec<u8> {
    let half = i64::from(size / 2);
    let (x0, y0) = (i64::from(center.x) - half, i64::from(center.y) - half);
    let z = i64::from(center.z);
    let mut out = Vec::with_capacity((size * size) as usize);
    for y in y0..y0 + i64::from(size) {
        for x in x0..x0 + i64::from(size) {
            out.push(volume.get_signed(x, y, z).map_or(0, to_byte));
        }
    }
    out
}

pub fn encode_png(pixels: &[u8], width: u32, height: u32) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut enc = png::Encoder::new(&mut buf, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(pixels).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(buf)
}
