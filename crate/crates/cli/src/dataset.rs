//! On-disk dataset layout.
//!
//! ```text
//! <dir>/dataset.json           {"format": 1, "spec": {...}, "train": n, "test": m}
//! <dir>/<split>/rgb_NNNNN.bin  one image per scene
//! <dir>/<split>/tir_NNNNN.bin
//! <dir>/<split>/annotations.txt
//! ```
//!
//! An image file is one ASCII header line followed by the raw values:
//!
//! ```text
//! AMFDIMG 1 f64le <channels> <height> <width> <day|night> <scene seed>\n
//! <channels·height·width little-endian f64, channel-major then row-major>
//! ```
//!
//! `annotations.txt` starts with a `#` comment line; every other line is one
//! box: `<scene index> <x1> <y1> <x2> <y2> <category> <NO|LO|MO|HO>`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use amfd_core::boxes::{BBox, GtBox, Occlusion};
use amfd_core::tensor::Tensor;
use amfd_core::toynet::{Dataset, DatasetSpec, Lighting, Scene};
use serde::{Deserialize, Serialize};

use crate::config::Split;
use crate::error::{CliError, CliResult};

pub const IMAGE_MAGIC: &str = "AMFDIMG";
pub const FORMAT_VERSION: u32 = 1;
pub const ANNOTATION_HEADER: &str = "# scene x1 y1 x2 y2 category occlusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: u32,
    pub spec: DatasetSpec,
    pub train: usize,
    pub test: usize,
}

pub fn encode_image(t: &Tensor, lighting: Lighting, seed: u64) -> Vec<u8> {
    let s = t.shape();
    let mut out = format!(
        "{IMAGE_MAGIC} {FORMAT_VERSION} f64le {} {} {} {} {seed}\n",
        s[0],
        s[1],
        s[2],
        lighting.name()
    )
    .into_bytes();
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<(Tensor, Lighting, u64), String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not UTF-8")?;
    let f: Vec<&str> = header.split(' ').collect();
    if f.len() != 8 || f[0] != IMAGE_MAGIC {
        return Err(format!("bad header {header:?}"));
    }
    if f[1] != FORMAT_VERSION.to_string() || f[2] != "f64le" {
        return Err(format!("unsupported version or dtype in {header:?}"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| format!("bad extent {s:?}"));
    let shape = [dim(f[3])?, dim(f[4])?, dim(f[5])?];
    let lighting = match f[6] {
        "day" => Lighting::Day,
        "night" => Lighting::Night,
        other => return Err(format!("bad lighting {other:?}")),
    };
    let seed = f[7].parse::<u64>().map_err(|_| format!("bad seed {:?}", f[7]))?;
    let payload = &bytes[nl + 1..];
    let n = shape.iter().product::<usize>();
    if payload.len() != n * 8 {
        return Err(format!(
            "payload holds {} bytes, header wants {}",
            payload.len(),
            n * 8
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let t = Tensor::new(&shape, values).map_err(|e| e.to_string())?;
    Ok((t, lighting, seed))
}

pub fn encode_annotations(scenes: &[Scene]) -> String {
    let mut out = format!("{ANNOTATION_HEADER}\n");
    for (i, s) in scenes.iter().enumerate() {
        for g in &s.annotations {
            let b = g.bbox;
            writeln!(
                out,
                "{i} {} {} {} {} {} {}",
                b.x1, b.y1, b.x2, b.y2, g.category, g.occlusion
            )
            .expect("writing to a string");
        }
    }
    out
}

pub fn decode_annotations(text: &str, scenes: usize) -> Result<Vec<Vec<GtBox>>, String> {
    let mut out = vec![Vec::new(); scenes];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| format!("line {}: {m}", n + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let image: usize = f[0].parse().map_err(|_| bad("bad scene index"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad coordinate"));
        let bbox = BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?)
            .ok_or_else(|| bad("empty box"))?;
        let occlusion: Occlusion = f[6].parse().map_err(|e: String| bad(&e))?;
        let slot = out
            .get_mut(image)
            .ok_or_else(|| bad(&format!("scene {image} of {scenes}")))?;
        slot.push(GtBox {
            bbox,
            category: f[5].to_string(),
            occlusion,
        });
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn image_name(modality: &str, i: usize) -> String {
    format!("{modality}_{i:05}.bin")
}

fn write_split(dir: &Path, scenes: &[Scene]) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        write(&dir.join(image_name("rgb", i)), &encode_image(&s.rgb, s.lighting, s.seed))?;
        write(&dir.join(image_name("tir", i)), &encode_image(&s.tir, s.lighting, s.seed))?;
    }
    write(&dir.join("annotations.txt"), encode_annotations(scenes).as_bytes())
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_split(&dir.join("train"), &data.train)?;
    write_split(&dir.join("test"), &data.test)?;
    let index = DatasetIndex {
        format: FORMAT_VERSION,
        spec: data.spec.clone(),
        train: data.train.len(),
        test: data.test.len(),
    };
    let json = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    write(&dir.join("dataset.json"), json.as_bytes())
}

fn read_split(dir: &Path, count: usize) -> CliResult<Vec<Scene>> {
    let ann_path = dir.join("annotations.txt");
    let text = String::from_utf8(read(&ann_path)?)
        .map_err(|_| CliError::Data(format!("{}: not UTF-8", ann_path.display())))?;
    let mut boxes = decode_annotations(&text, count)
        .map_err(|e| CliError::Data(format!("{}: {e}", ann_path.display())))?;
    let mut scenes = Vec::with_capacity(count);
    for (i, annotations) in boxes.drain(..).enumerate() {
        let load = |m: &str| -> CliResult<(Tensor, Lighting, u64)> {
            let p = dir.join(image_name(m, i));
            decode_image(&read(&p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        };
        let (rgb, lighting, seed) = load("rgb")?;
        let (tir, tir_lighting, tir_seed) = load("tir")?;
        if (lighting, seed) != (tir_lighting, tir_seed) {
            return Err(CliError::Data(format!(
                "{}: scene {i} rgb and tir headers disagree",
                dir.display()
            )));
        }
        scenes.push(Scene {
            rgb,
            tir,
            annotations,
            lighting,
            seed,
        });
    }
    Ok(scenes)
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    let index_path = dir.join("dataset.json");
    let index: DatasetIndex = serde_json::from_slice(&read(&index_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", index_path.display())))?;
    if index.format != FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported format {}",
            index_path.display(),
            index.format
        )));
    }
    let train = read_split(&dir.join(Split::Train.name()), index.train)?;
    let test = read_split(&dir.join(Split::Test.name()), index.test)?;
    Ok(Dataset::from_parts(index.spec, train, test)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use amfd_core::toynet::generate_scene;

    #[test]
    fn image_round_trip_is_exact() {
        let s = generate_scene(&DatasetSpec::default(), 3).unwrap();
        let bytes = encode_image(&s.rgb, s.lighting, s.seed);
        assert!(bytes.starts_with(b"AMFDIMG 1 f64le 1 96 96 "));
        let (t, l, seed) = decode_image(&bytes).unwrap();
        assert_eq!((t, l, seed), (s.rgb, s.lighting, s.seed));
    }

    #[test]
    fn corrupt_images_are_rejected() {
        let s = generate_scene(&DatasetSpec::default(), 3).unwrap();
        let bytes = encode_image(&s.rgb, s.lighting, s.seed);
        assert!(decode_image(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_image(b"AMFDIMG 1 f32le 1 1 1 day 0\n\0\0\0\0").is_err());
        assert!(decode_image(b"no newline").is_err());
    }

    #[test]
    fn annotation_round_trip_is_exact() {
        let spec = DatasetSpec {
            occlusion_prob: 0.9,
            max_objects: 4,
            ..DatasetSpec::default()
        };
        let scenes: Vec<Scene> = (0..6).map(|i| generate_scene(&spec, i).unwrap()).collect();
        let text = encode_annotations(&scenes);
        let back = decode_annotations(&text, scenes.len()).unwrap();
        for (s, b) in scenes.iter().zip(&back) {
            assert_eq!(&s.annotations, b);
        }
        for line in text.lines().skip(1) {
            let occ = line.split(' ').last().unwrap();
            assert!(["NO", "LO", "MO", "HO"].contains(&occ), "{line}");
        }
    }

    #[test]
    fn bad_annotation_lines() {
        for text in [
            "0 1 2 3 4 person XX\n",
            "5 1 2 3 4 person NO\n",
            "0 3 2 1 4 person NO\n",
            "0 1 2 3 person NO\n",
        ] {
            assert!(decode_annotations(text, 2).is_err(), "{text}");
        }
    }
}
