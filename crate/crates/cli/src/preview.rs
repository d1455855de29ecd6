//! 8-bit previews of rendered channels.

use supergseg::formats::to_u8;
use supergseg::raster::{Channel, FeatureImage};

/// RGB bytes: colors as they are, feature channels mapped from [-1, 1]
/// through their first three components.
pub fn preview_rgb(img: &FeatureImage, channel: Channel) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixel_count() * 3);
    for p in 0..img.pixel_count() {
        let px = img.pixel(p);
        for c in 0..3 {
            let v = px.get(c).copied().unwrap_or(0.0);
            out.push(match channel {
                Channel::Color => to_u8(v),
                _ => to_u8(0.5 + 0.5 * v),
            });
        }
    }
    out
}

pub fn encode_png(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header into memory");
        writer.write_image_data(rgb).expect("png data into memory");
    }
    out
}

pub fn preview_png(img: &FeatureImage, channel: Channel) -> Vec<u8> {
    encode_png(img.width, img.height, &preview_rgb(img, channel))
}
