//! Dataset manifests, portable pixmap decoding, and the preprocessing that
//! turns an image file into the network's input tensor.
//!
//! Manifests are UTF-8, tab-separated, one `path<TAB>label<TAB>video_id`
//! record per line. Images are portable pixmaps/graymaps (P2/P3/P5/P6) with
//! maxval 255; graymaps are replicated to three channels.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_path: String,
    pub label: String,
    /// Empty for datasets without a video grouping.
    pub video_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    /// Sorted distinct class names; the index into this list is the label
    /// index used everywhere downstream.
    pub classes: Vec<String>,
}

impl DatasetManifest {
    /// Build from samples, deriving the lexicographic class list.
    pub fn from_samples(samples: Vec<Sample>) -> Result<DatasetManifest> {
        if samples.is_empty() {
            return Err(Error::Data("empty manifest".into()));
        }
        let mut classes: Vec<String> = samples
            .iter()
            .map(|s| s.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        classes.sort();
        Ok(DatasetManifest { samples, classes })
    }

    /// Sub-manifest with the same class table (label indices stay aligned).
    pub fn subset(&self, keep: impl Fn(&Sample) -> bool) -> DatasetManifest {
        DatasetManifest {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            classes: self.classes.clone(),
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Load a tab-separated manifest. Classes come out sorted; duplicate image
/// paths and malformed lines are rejected with their line number.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    let mut seen_paths = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected path<TAB>label<TAB>video_id, got {} field(s)",
                    fields.len()
                ),
            });
        }
        let (path, label, video_id) = (fields[0], fields[1], fields[2]);
        if path.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty image path".into(),
            });
        }
        if label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty label".into(),
            });
        }
        if !seen_paths.insert(path.to_string()) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate path {path:?}"),
            });
        }
        samples.push(Sample {
            image_path: path.to_string(),
            label: label.to_string(),
            video_id: video_id.to_string(),
        });
    }
    DatasetManifest::from_samples(samples)
}

/// Write a manifest in the same tab-separated format.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &manifest.samples {
        out.push_str(&format!("{}\t{}\t{}\n", s.image_path, s.label, s.video_id));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Decoded 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn decode_image(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmCursor<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Truncated("pnm header ended early".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::Data(format!(
                    "invalid pnm number {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

/// Decode a P2/P3/P5/P6 image. Graymaps replicate into three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<RawImage> {
    let mut cur = PnmCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let (gray, binary) = match magic {
        b"P2" => (true, false),
        b"P3" => (false, false),
        b"P5" => (true, true),
        b"P6" => (false, true),
        other => {
            return Err(Error::BadMagic {
                expected: "P2/P3/P5/P6",
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if width == 0 || height == 0 {
        return Err(Error::Data("pnm dimensions must be positive".into()));
    }
    if maxval != 255 {
        return Err(Error::Data(format!(
            "unsupported pnm maxval {maxval} (expected 255)"
        )));
    }
    let samples_per_pixel = if gray { 1 } else { 3 };
    let count = width * height * samples_per_pixel;

    let raw: Vec<u8> = if binary {
        // Exactly one whitespace byte separates the header from the payload.
        cur.pos += 1;
        if cur.pos > bytes.len() || bytes.len() - cur.pos < count {
            return Err(Error::Truncated(format!(
                "pnm payload has {} of {count} bytes",
                bytes.len().saturating_sub(cur.pos)
            )));
        }
        bytes[cur.pos..cur.pos + count].to_vec()
    } else {
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let v = cur.number().map_err(|e| match e {
                Error::Truncated(_) => Error::Truncated("pnm ascii payload ended early".into()),
                other => other,
            })?;
            if v > 255 {
                return Err(Error::Data(format!("pnm sample {v} exceeds maxval 255")));
            }
            vals.push(v as u8);
        }
        vals
    };

    let data = if gray {
        let mut rgb = Vec::with_capacity(count * 3);
        for &v in &raw {
            rgb.extend_from_slice(&[v, v, v]);
        }
        rgb
    } else {
        raw
    };
    Ok(RawImage {
        width,
        height,
        data,
    })
}

/// Resize/crop/mean-subtraction policy feeding the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Shorter-side target of the aspect-preserving resize.
    pub resize_to: usize,
    /// Square center-crop side; must not exceed `resize_to`.
    pub crop: usize,
    pub channel_means: [f32; 3],
}

impl PreprocessConfig {
    pub fn new(resize_to: usize, crop: usize, channel_means: [f32; 3]) -> Result<PreprocessConfig> {
        if resize_to == 0 || crop == 0 {
            return Err(Error::Config("resize and crop must be positive".into()));
        }
        if crop > resize_to {
            return Err(Error::Config(format!(
                "crop {crop} exceeds resize target {resize_to}"
            )));
        }
        Ok(PreprocessConfig {
            resize_to,
            crop,
            channel_means,
        })
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resize_to: 256,
            crop: 227,
            channel_means: [0.0; 3],
        }
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resize with half-pixel centers; constant images stay constant
/// bitwise because the interpolation is written as nested lerps.
fn resize_bilinear(img: &RawImage, new_w: usize, new_h: usize) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let sx = w as f32 / new_w as f32;
    let sy = h as f32 / new_h as f32;
    let mut out = vec![0f32; new_w * new_h * 3];
    for dy in 0..new_h {
        let fy = ((dy as f32 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for dx in 0..new_w {
            let fx = ((dx as f32 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for c in 0..3 {
                let p = |y: usize, x: usize| f32::from(img.data[(y * w + x) * 3 + c]);
                let top = lerp(p(y0, x0), p(y0, x1), tx);
                let bot = lerp(p(y1, x0), p(y1, x1), tx);
                out[(dy * new_w + dx) * 3 + c] = lerp(top, bot, ty);
            }
        }
    }
    out
}

/// Resized and center-cropped pixels in channel-major order, before mean
/// subtraction. Shared by `preprocess` and `compute_means`.
fn resize_crop(img: &RawImage, cfg: &PreprocessConfig) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    // Shorter side lands exactly on resize_to; the other side keeps aspect.
    let (new_w, new_h) = if h <= w {
        let scaled = ((w as f64 * cfg.resize_to as f64 / h as f64).round() as usize).max(1);
        (scaled.max(cfg.resize_to), cfg.resize_to)
    } else {
        let scaled = ((h as f64 * cfg.resize_to as f64 / w as f64).round() as usize).max(1);
        (cfg.resize_to, scaled.max(cfg.resize_to))
    };
    let resized = resize_bilinear(img, new_w, new_h);
    let off_x = (new_w - cfg.crop) / 2;
    let off_y = (new_h - cfg.crop) / 2;
    let mut out = vec![0f32; 3 * cfg.crop * cfg.crop];
    for c in 0..3 {
        for y in 0..cfg.crop {
            for x in 0..cfg.crop {
                out[(c * cfg.crop + y) * cfg.crop + x] =
                    resized[((y + off_y) * new_w + (x + off_x)) * 3 + c];
            }
        }
    }
    out
}

/// Full input pipeline: bilinear resize (shorter side to `resize_to`), center
/// crop, channel-major conversion, per-channel mean subtraction.
pub fn preprocess(img: &RawImage, cfg: &PreprocessConfig) -> Tensor {
    let mut data = resize_crop(img, cfg);
    let plane = cfg.crop * cfg.crop;
    for c in 0..3 {
        let mean = cfg.channel_means[c];
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v -= mean;
        }
    }
    Tensor::from_vec(Shape::map(3, cfg.crop, cfg.crop).expect("valid crop"), data)
        .expect("sizes agree")
}

/// Per-channel mean over the resized/cropped pixels of every manifest image.
pub fn compute_means(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> Result<[f32; 3]> {
    if manifest.is_empty() {
        return Err(Error::Data(
            "cannot compute means of an empty manifest".into(),
        ));
    }
    let plane = cfg.crop * cfg.crop;
    let mut sums = [0f64; 3];
    for sample in &manifest.samples {
        let img = decode_image(Path::new(&sample.image_path))?;
        let data = resize_crop(&img, cfg);
        for c in 0..3 {
            sums[c] += data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>();
        }
    }
    let count = (manifest.len() * plane) as f64;
    Ok([
        (sums[0] / count) as f32,
        (sums[1] / count) as f32,
        (sums[2] / count) as f32,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn p6(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
        bytes.extend_from_slice(pixels);
        bytes
    }

    #[test]
    fn manifest_classes_sorted() {
        let m = parse_manifest("a.ppm\tgolf\tv1\nb.ppm\tdiving\tv2\n").unwrap();
        assert_eq!(m.classes, vec!["diving", "golf"]);
        assert_eq!(m.label_index("golf"), Some(1));
    }

    #[test]
    fn manifest_missing_tab_names_line() {
        match parse_manifest("a.ppm\tgolf\tv1\nb.ppm golf v2\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_duplicate_path_rejected() {
        assert!(parse_manifest("a.ppm\tx\tv1\na.ppm\ty\tv2\n").is_err());
    }

    #[test]
    fn manifest_empty_rejected() {
        assert!(matches!(parse_manifest(""), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_nine_labels_nine_classes() {
        let mut text = String::new();
        for (i, label) in [
            "dive", "golf", "gym", "horse", "kick", "lift", "run", "skate", "walk",
        ]
        .iter()
        .enumerate()
        {
            text.push_str(&format!("img{i}.ppm\t{label}\tv{i}\n"));
        }
        assert_eq!(parse_manifest(&text).unwrap().classes.len(), 9);
    }

    #[test]
    fn manifest_round_trip() {
        let m = parse_manifest("a.ppm\tgolf\tv1\nb.ppm\tdiving\t\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn decode_single_red_pixel() {
        let img = decode_pnm(&p6(1, 1, &[255, 0, 0])).unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.data, vec![255, 0, 0]);
    }

    #[test]
    fn decode_graymap_replicates_channels() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.data, vec![7, 7, 7, 9, 9, 9]);
    }

    #[test]
    fn decode_ascii_variants() {
        let img = decode_pnm(b"P3\n1 1\n255\n10 20 30\n").unwrap();
        assert_eq!(img.data, vec![10, 20, 30]);
        let gray = decode_pnm(b"P2\n# comment\n1 2\n255\n5\n6\n").unwrap();
        assert_eq!(gray.data, vec![5, 5, 5, 6, 6, 6]);
    }

    #[test]
    fn decode_truncated_payload() {
        let bytes = p6(2, 2, &[1, 2, 3]);
        assert!(matches!(decode_pnm(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn decode_unknown_magic_and_bad_maxval() {
        assert!(matches!(
            decode_pnm(b"P9\n1 1\n255\nxxx"),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            decode_pnm(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn preprocess_cancels_matching_mean() {
        let img = decode_pnm(&p6(8, 8, &[120u8; 8 * 8 * 3])).unwrap();
        let cfg = PreprocessConfig::new(6, 4, [120.0; 3]).unwrap();
        let t = preprocess(&img, &cfg);
        assert_eq!(t.shape().dims(), &[3, 4, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_center_crop_offset() {
        // 256 -> 227 crop leaves an offset of (256-227)/2 = 14 on each axis.
        let mut pixels = vec![0u8; 256 * 256 * 3];
        // Mark the pixel that should land at crop position (0, 0).
        pixels[(14 * 256 + 14) * 3] = 200;
        let img = RawImage {
            width: 256,
            height: 256,
            data: pixels,
        };
        let cfg = PreprocessConfig::new(256, 227, [0.0; 3]).unwrap();
        let t = preprocess(&img, &cfg);
        assert_eq!(t.shape().dims(), &[3, 227, 227]);
        assert_eq!(t.get3(0, 0, 0), 200.0);
    }

    #[test]
    fn preprocess_identity_when_sizes_match() {
        let pixels: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5 % 251) as u8).collect();
        let img = RawImage {
            width: 4,
            height: 4,
            data: pixels.clone(),
        };
        let cfg = PreprocessConfig::new(4, 4, [0.0; 3]).unwrap();
        let t = preprocess(&img, &cfg);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(t.get3(c, y, x), f32::from(pixels[(y * 4 + x) * 3 + c]));
                }
            }
        }
    }

    #[test]
    fn preprocess_upsamples_degenerate_input() {
        let img = RawImage {
            width: 1,
            height: 1,
            data: vec![50, 60, 70],
        };
        let cfg = PreprocessConfig::new(8, 8, [0.0; 3]).unwrap();
        let t = preprocess(&img, &cfg);
        assert_eq!(t.shape().dims(), &[3, 8, 8]);
        assert!(t.data()[..64].iter().all(|&v| v == 50.0));
    }

    #[test]
    fn crop_larger_than_resize_rejected() {
        assert!(PreprocessConfig::new(100, 200, [0.0; 3]).is_err());
    }

    #[test]
    fn means_average_over_images() {
        let dir = tempfile::tempdir().unwrap();
        for (name, value) in [("black.ppm", 0u8), ("gray.ppm", 100u8)] {
            let mut f = std::fs::File::create(dir.path().join(name)).unwrap();
            f.write_all(&p6(4, 4, &[value; 4 * 4 * 3])).unwrap();
        }
        let manifest = DatasetManifest::from_samples(vec![
            Sample {
                image_path: dir.path().join("black.ppm").to_string_lossy().into_owned(),
                label: "a".into(),
                video_id: "v1".into(),
            },
            Sample {
                image_path: dir.path().join("gray.ppm").to_string_lossy().into_owned(),
                label: "a".into(),
                video_id: "v2".into(),
            },
        ])
        .unwrap();
        let cfg = PreprocessConfig::new(4, 4, [0.0; 3]).unwrap();
        let means = compute_means(&manifest, &cfg).unwrap();
        for c in 0..3 {
            assert!((means[c] - 50.0).abs() < 1e-4);
        }

        // Permuting sample order leaves the means unchanged (same sums).
        let mut reversed = manifest.clone();
        reversed.samples.reverse();
        let means_rev = compute_means(&reversed, &cfg).unwrap();
        for c in 0..3 {
            assert!((means[c] - means_rev[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_preprocess_is_deterministic() {
        let bytes = p6(
            5,
            3,
            &(0..45).map(|i| (i * 7 % 256) as u8).collect::<Vec<_>>(),
        );
        let cfg = PreprocessConfig::new(3, 3, [1.0, 2.0, 3.0]).unwrap();
        let a = preprocess(&decode_pnm(&bytes).unwrap(), &cfg);
        let b = preprocess(&decode_pnm(&bytes).unwrap(), &cfg);
        assert_eq!(a, b);
    }
}
