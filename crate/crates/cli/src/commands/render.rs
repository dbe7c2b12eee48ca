//! `altinc render`: paints a label map (or the argmax of a probability map)
//! as a color PPM.

use std::path::Path;

use anyhow::{bail, Result};

use altinc_core::io;
use altinc_core::pseudo::generate_pseudo_labels;
use altinc_core::{Error, LabelMap, Real};

use crate::config::RunConfig;

/// Parses "r,g,b;r,g,b;..." into a palette.
pub fn parse_palette(text: &str) -> Result<Vec<[u8; 3]>> {
    let mut palette = Vec::new();
    for entry in text.split(';') {
        let parts: Vec<&str> = entry.split(',').collect();
        if parts.len() != 3 {
            bail!("palette entry {entry:?} is not r,g,b");
        }
        let mut color = [0u8; 3];
        for (slot, part) in color.iter_mut().zip(parts) {
            *slot = part.trim().parse()?;
        }
        palette.push(color);
    }
    Ok(palette)
}

pub fn labels_to_rgb(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut rgb = Vec::with_capacity(3 * labels.len());
    for &l in labels.labels() {
        let color = palette
            .get(l as usize)
            .ok_or(Error::PaletteOutOfRange(l as usize, palette.len()))?;
        rgb.extend_from_slice(color);
    }
    Ok(rgb)
}

pub fn cmd_render(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    palette_override: Option<&str>,
) -> Result<()> {
    let palette = match palette_override {
        Some(text) => parse_palette(text)?,
        None => cfg.render_palette(),
    };
    let labels = match input.extension().and_then(|e| e.to_str()) {
        Some("pgm") => io::load_pgm(input)?,
        Some("probmap") => {
            let probs = io::load_probmap::<Real>(input)?;
            generate_pseudo_labels(&probs).labels
        }
        _ => bail!(
            "render input must be a .pgm label map or a .probmap file, got {}",
            input.display()
        ),
    };
    let rgb = labels_to_rgb(&labels, &palette)?;
    io::save_ppm(output, labels.width(), labels.height(), &rgb)?;
    println!(
        "render: {} -> {} ({}x{})",
        input.display(),
        output.display(),
        labels.width(),
        labels.height()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_parses_and_rejects() {
        let p = parse_palette("255,0,0;0,255,0").unwrap();
        assert_eq!(p, vec![[255, 0, 0], [0, 255, 0]]);
        assert!(parse_palette("1,2").is_err());
        assert!(parse_palette("256,0,0").is_err());
    }

    #[test]
    fn out_of_palette_class_is_an_error() {
        let labels = LabelMap::filled(2, 2, 3);
        let err = labels_to_rgb(&labels, &[[0, 0, 0]]).unwrap_err();
        assert!(err.to_string().contains("outside palette"));
    }

    #[test]
    fn single_class_map_renders_solid_color() {
        let labels = LabelMap::filled(2, 2, 0);
        let rgb = labels_to_rgb(&labels, &[[255, 0, 0]]).unwrap();
        assert_eq!(rgb, vec![255, 0, 0, 255, 0, 0, 255, 0, 0, 255, 0, 0]);
    }
}
