//! Synthetic face-like images, manifests and pair lists.
//!
//! An identity is a genotype: the geometry and intensity of a head outline,
//! eyes, brows, nose, mouth and a mark. Each image of an identity re-renders
//! the genotype under jitter (translation, scale, brightness, small part
//! variation, pixel noise). Rendering is quantized to 8 bits so that images
//! held in memory equal the PNG files written to disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Pair;
use crate::geometry::Image;
use crate::rng::{derive_seed, CounterRng};

pub const MANIFEST_HEADER: &str = "# lafs-manifest v1";
pub const PAIRS_HEADER: &str = "# lafs-pairs v1";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceSpec {
    pub canvas: usize,
    pub n_identities: usize,
    pub images_per_identity: usize,
    /// Maximum translation in pixels at a 112 canvas; scaled with the canvas.
    pub shift_px: f32,
    pub scale_jitter: f32,
    pub brightness: f32,
    pub noise_std: f32,
    /// Relative per-image variation of part sizes and positions.
    pub part_jitter: f32,
    /// Offset into the identity stream, so disjoint identity sets can share a seed.
    pub first_identity: u64,
    pub seed: u64,
}

impl Default for SyntheticFaceSpec {
    fn default() -> Self {
        SyntheticFaceSpec {
            canvas: 112,
            n_identities: 200,
            images_per_identity: 5,
            shift_px: 6.0,
            scale_jitter: 0.05,
            brightness: 0.1,
            noise_std: 0.03,
            part_jitter: 0.08,
            first_identity: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    value: f32,
}

/// Identity-level parameters in normalized canvas units.
#[derive(Clone, Debug, PartialEq)]
pub struct Genotype {
    background: f32,
    head: Ellipse,
    eye_y: f32,
    eye_dx: f32,
    eye_r: f32,
    eye_value: f32,
    brow_gap: f32,
    brow_w: f32,
    brow_value: f32,
    nose: Ellipse,
    mouth: Ellipse,
    mark: Ellipse,
}

impl Genotype {
    pub fn sample(seed: u64, identity: u64) -> Self {
        let mut r = CounterRng::from_parts(&[seed, identity, 0x6E0]);
        let mut u = |lo: f64, hi: f64| r.range(lo, hi) as f32;
        let head = Ellipse {
            cx: u(0.47, 0.53),
            cy: u(0.50, 0.55),
            rx: u(0.28, 0.38),
            ry: u(0.36, 0.45),
            value: u(0.45, 0.75),
        };
        let eye_y = u(0.36, 0.46);
        let eye_dx = u(0.10, 0.17);
        let eye_r = u(0.03, 0.06);
        let eye_value = u(0.0, 0.25);
        let brow_gap = u(0.04, 0.09);
        let brow_w = u(0.05, 0.10);
        let brow_value = u(0.05, 0.40);
        let nose = Ellipse {
            cx: head.cx + u(-0.02, 0.02),
            cy: u(0.52, 0.60),
            rx: u(0.025, 0.06),
            ry: u(0.05, 0.10),
            value: u(0.25, 0.9),
        };
        let mouth = Ellipse {
            cx: head.cx + u(-0.03, 0.03),
            cy: u(0.68, 0.77),
            rx: u(0.07, 0.15),
            ry: u(0.015, 0.045),
            value: u(0.05, 0.35),
        };
        let mark = Ellipse {
            cx: head.cx + u(-0.22, 0.22),
            cy: u(0.30, 0.80),
            rx: u(0.015, 0.04),
            ry: u(0.015, 0.04),
            value: u(0.0, 1.0),
        };
        Genotype {
            background: u(0.05, 0.30),
            head,
            eye_y,
            eye_dx,
            eye_r,
            eye_value,
            brow_gap,
            brow_w,
            brow_value,
            nose,
            mouth,
            mark,
        }
    }

    fn parts(&self, jit: &mut impl FnMut(f32) -> f32) -> Vec<Ellipse> {
        let g = self;
        let eye_y = g.eye_y + jit(0.01);
        let dx = g.eye_dx * (1.0 + jit(0.05));
        let mut parts = vec![g.head];
        for side in [-1.0f32, 1.0] {
            let cx = g.head.cx + side * dx;
            parts.push(Ellipse {
                cx,
                cy: eye_y - g.eye_r - g.brow_gap,
                rx: g.brow_w,
                ry: 0.012,
                value: g.brow_value,
            });
            parts.push(Ellipse {
                cx,
                cy: eye_y,
                rx: g.eye_r * 1.3,
                ry: g.eye_r,
                value: g.eye_value,
            });
        }
        parts.push(Ellipse {
            ry: g.nose.ry * (1.0 + jit(1.0)),
            ..g.nose
        });
        parts.push(Ellipse {
            rx: g.mouth.rx * (1.0 + jit(1.0)),
            ry: g.mouth.ry * (1.0 + jit(2.0)),
            ..g.mouth
        });
        parts.push(g.mark);
        parts
    }
}

/// Renders one jittered instance of `g`.
pub fn render(g: &Genotype, spec: &SyntheticFaceSpec, jitter_seed: u64) -> Result<Image> {
    let n = spec.canvas;
    if n < 8 {
        return Err(Error::Config(format!("canvas {n} below 8")));
    }
    let mut r = CounterRng::new(jitter_seed);
    let pj = spec.part_jitter;
    let shift = spec.shift_px / 112.0;
    let dx = r.range(-shift as f64, shift as f64) as f32;
    let dy = r.range(-shift as f64, shift as f64) as f32;
    let scale = 1.0 + r.range(-spec.scale_jitter as f64, spec.scale_jitter as f64) as f32;
    let bright = r.range(-spec.brightness as f64, spec.brightness as f64) as f32;
    let mut jit = |k: f32| r.range(-(pj * k) as f64, (pj * k) as f64) as f32;
    let parts = g.parts(&mut jit);
    let px = 1.0 / n as f32;
    let mut data = vec![g.background; n * n];
    for e in parts {
        let (cx, cy) = (0.5 + (e.cx - 0.5) * scale + dx, 0.5 + (e.cy - 0.5) * scale + dy);
        let (rx, ry) = (e.rx * scale, e.ry * scale);
        let (x0, x1) = (((cx - rx) / px).floor().max(0.0) as usize, ((cx + rx) / px).ceil() as usize);
        let (y0, y1) = (((cy - ry) / px).floor().max(0.0) as usize, ((cy + ry) / px).ceil() as usize);
        for y in y0..y1.min(n) {
            for x in x0..x1.min(n) {
                let (u, v) = (((x as f32 + 0.5) * px - cx) / rx, ((y as f32 + 0.5) * px - cy) / ry);
                let q = (u * u + v * v).sqrt();
                // Signed distance to the outline in pixels, roughly.
                let d = (q - 1.0) * rx.min(ry) / px;
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                let p = &mut data[y * n + x];
                *p += alpha * (e.value - *p);
            }
        }
    }
    for p in data.iter_mut() {
        *p = (*p + bright + spec.noise_std * r.normal() as f32).clamp(0.0, 1.0);
    }
    let img = Image::new(1, n, n, data)?;
    Image::from_gray_u8(n, n, &img.to_u8())
}

/// In-memory labelled images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub names: Vec<String>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize], labels: Option<&[usize]>) -> LabeledImages {
        LabeledImages {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: match labels {
                Some(l) => l.to_vec(),
                None => indices.iter().map(|&i| self.labels[i]).collect(),
            },
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }
}

/// Renders the whole spec in memory; label `i` is identity `first_identity + i`.
pub fn render_dataset(spec: &SyntheticFaceSpec) -> Result<LabeledImages> {
    let mut out = LabeledImages::default();
    for id in 0..spec.n_identities {
        let gid = spec.first_identity + id as u64;
        let g = Genotype::sample(spec.seed, gid);
        for k in 0..spec.images_per_identity {
            out.images.push(render(&g, spec, derive_seed(&[spec.seed, gid, k as u64, 0x11]))?);
            out.labels.push(id);
            out.names.push(format!("id{gid:05}/{k:03}.png"));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(String, usize)>,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for (p, l) in &self.entries {
            s.push_str(&format!("{p}\t{l}\n"));
        }
        s
    }

    pub fn parse(root: &Path, text: &str, source: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format {
                path: source.to_path_buf(),
                detail: format!("missing header {MANIFEST_HEADER:?}"),
            });
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |detail: String| Error::Format { path: source.to_path_buf(), detail: format!("line {}: {detail}", i + 2) };
            let (p, l) = line.split_once('\t').ok_or_else(|| bad("expected path<TAB>label".into()))?;
            let l: usize = l.trim().parse().map_err(|_| bad(format!("bad label {l:?}")))?;
            if !seen.insert(p.to_string()) {
                return Err(bad(format!("duplicate path {p}")));
            }
            entries.push((p.to_string(), l));
        }
        let max = entries.iter().map(|e| e.1).max().map_or(0, |m| m + 1);
        let present: std::collections::BTreeSet<usize> = entries.iter().map(|e| e.1).collect();
        if present.len() != max {
            return Err(Error::Format {
                path: source.to_path_buf(),
                detail: "labels are not contiguous from 0".into(),
            });
        }
        Ok(DatasetManifest { root: root.to_path_buf(), entries })
    }
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::Format { path: path.to_path_buf(), detail: "only grayscale images are written".into() });
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &img.to_u8(), img.width() as u32, img.height() as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })?
        .into_luma8();
    Image::from_gray_u8(img.height() as usize, img.width() as usize, img.as_raw())
}

/// Renders `spec` into `out_dir` as PNGs plus `manifest.tsv`.
pub fn generate_synthetic(spec: &SyntheticFaceSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let data = render_dataset(spec)?;
    let mut entries = Vec::with_capacity(data.len());
    for ((img, label), name) in data.images.iter().zip(&data.labels).zip(&data.names) {
        write_png(&out_dir.join(name), img)?;
        entries.push((name.clone(), *label));
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    DatasetManifest::parse(root, &text, path)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<LabeledImages> {
    let mut out = LabeledImages::default();
    for (p, l) in &manifest.entries {
        out.images.push(read_png(&manifest.root.join(p))?);
        out.labels.push(*l);
        out.names.push(p.clone());
    }
    Ok(out)
}

/// `ref_a<TAB>ref_b<TAB>{0,1}` lines referring to dataset names.
pub fn write_pairs(path: &Path, names: &[String], pairs: &[Pair]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = format!("{PAIRS_HEADER}\n");
    for p in pairs {
        s.push_str(&format!("{}\t{}\t{}\n", names[p.a], names[p.b], u8::from(p.genuine)));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path, names: &[String]) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: std::collections::HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail: format!("line {}: {detail}", i + 1) };
        let f: Vec<&str> = line.split('\t').collect();
        let [a, b, g] = f[..] else {
            return Err(bad("expected ref_a<TAB>ref_b<TAB>{0,1}".into()));
        };
        let look = |r: &str| index.get(r).copied().ok_or_else(|| bad(format!("unknown image {r}")));
        let genuine = match g.trim() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("bad genuine flag {other:?}"))),
        };
        let (a, b) = (look(a)?, look(b)?);
        if a == b {
            return Err(bad("pair compares an image with itself".into()));
        }
        out.push(Pair { a, b, genuine });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticFaceSpec {
        SyntheticFaceSpec { canvas: 32, n_identities: 6, images_per_identity: 3, seed: 5, ..Default::default() }
    }

    #[test]
    fn cardinality_and_labels() {
        let spec = SyntheticFaceSpec { n_identities: 200, images_per_identity: 5, canvas: 16, ..Default::default() };
        let d = render_dataset(&spec).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.num_labels(), 200);
        assert_eq!(*d.labels.last().unwrap(), 199);
    }

    #[test]
    fn rendering_is_deterministic() {
        let (a, b) = (render_dataset(&small()).unwrap(), render_dataset(&small()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn identities_are_separable_on_average() {
        let spec = SyntheticFaceSpec { images_per_identity: 6, ..small() };
        let d = render_dataset(&spec).unwrap();
        let dist = |a: &Image, b: &Image| -> f64 {
            a.pixels().iter().zip(b.pixels()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
        };
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                let v = dist(&d.images[i], &d.images[j]);
                if d.labels[i] == d.labels[j] {
                    within += v;
                    nw += 1;
                } else {
                    between += v;
                    nb += 1;
                }
            }
        }
        assert!(between / nb as f64 > within / nw as f64);
    }

    #[test]
    fn png_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        let read = read_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(read.entries, m.entries);
        let loaded = load_dataset(&read).unwrap();
        assert_eq!(loaded, render_dataset(&spec).unwrap());
        let pairs = vec![Pair { a: 0, b: 1, genuine: true }, Pair { a: 0, b: 4, genuine: false }];
        let pp = dir.path().join("pairs.tsv");
        write_pairs(&pp, &loaded.names, &pairs).unwrap();
        assert_eq!(read_pairs(&pp, &loaded.names).unwrap(), pairs);
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_synthetic(&small(), a.path()).unwrap();
        generate_synthetic(&small(), b.path()).unwrap();
        for (p, _) in m.entries.iter().take(4) {
            assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
        }
    }

    #[test]
    fn manifest_rejects_gaps_and_duplicates() {
        let p = Path::new("m.tsv");
        assert!(DatasetManifest::parse(Path::new("."), &format!("{MANIFEST_HEADER}\na\t0\nb\t2\n"), p).is_err());
        assert!(DatasetManifest::parse(Path::new("."), &format!("{MANIFEST_HEADER}\na\t0\na\t0\n"), p).is_err());
        assert!(DatasetManifest::parse(Path::new("."), "a\t0\n", p).is_err());
    }
}
