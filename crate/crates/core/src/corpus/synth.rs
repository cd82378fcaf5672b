//! Seeded synthetic corpora: procedural images plus matching knowledge
//! bundles.
//!
//! Classes are factored into a texture (drawn as a cell pattern) and a tint
//! (a base color). The texture noun becomes the record's first entity and
//! the tint adjective its first attribute, so image structure and
//! description structure encode the same two factors. Base-to-new splits
//! over such classes leave the held-out classes describable: their factor
//! words already exist in the vocabulary even though their images were never
//! seen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::corpus::bundle::{CategoryEntry, DescriptionRecord, KnowledgeBundle};
use crate::corpus::instructions::N_H;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cell granularity of the procedural patterns, chosen to line up with the
/// default image patch side.
pub const PATTERN_CELL: usize = 4;

const TEXTURES: [&str; 8] = [
    "stripes", "spots", "bands", "checkers", "swirls", "dots", "ridges", "weave",
];

const TINTS: [(&str, [f64; 3]); 8] = [
    ("crimson", [0.80, 0.15, 0.20]),
    ("emerald", [0.10, 0.75, 0.30]),
    ("azure", [0.15, 0.40, 0.85]),
    ("amber", [0.90, 0.65, 0.10]),
    ("violet", [0.55, 0.20, 0.80]),
    ("coral", [0.95, 0.45, 0.35]),
    ("ivory", [0.90, 0.88, 0.78]),
    ("slate", [0.35, 0.40, 0.45]),
];

const FILLER_ENTITIES: [&str; 8] = [
    "surface", "outline", "body", "edge", "center", "background", "outer rim", "contour",
];

const FILLER_ATTRIBUTES: [&str; 8] = [
    "smooth", "coarse", "bright", "muted", "dense", "faintly glossy", "sparse", "matte",
];

/// Size parameters for a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub n_images_per_class: usize,
    pub image_side: usize,
    /// Entities per description record (first is always the texture noun).
    pub n_entities: usize,
    /// Attributes per description record (first is always the tint word).
    pub n_attributes: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("n_images_per_class", self.n_images_per_class),
            ("image_side", self.image_side),
            ("n_entities", self.n_entities),
            ("n_attributes", self.n_attributes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.image_side % PATTERN_CELL != 0 {
            return Err(Error::Argument(format!(
                "image_side {} must be divisible by the pattern cell {}",
                self.image_side, PATTERN_CELL
            )));
        }
        let max_classes = 4 * TINTS.len();
        if self.n_classes > max_classes {
            return Err(Error::Argument(format!(
                "n_classes {} exceeds the {max_classes} distinct texture/tint combinations",
                self.n_classes
            )));
        }
        if self.n_entities > 1 + FILLER_ENTITIES.len() {
            return Err(Error::Argument(format!(
                "n_entities {} exceeds pool capacity {}",
                self.n_entities,
                1 + FILLER_ENTITIES.len()
            )));
        }
        if self.n_attributes > 1 + FILLER_ATTRIBUTES.len() {
            return Err(Error::Argument(format!(
                "n_attributes {} exceeds pool capacity {}",
                self.n_attributes,
                1 + FILLER_ATTRIBUTES.len()
            )));
        }
        Ok(())
    }
}

/// Labeled image collection with per-image read counters.
///
/// Every pixel access goes through [`ImageDataset::image`], which bumps the
/// image's counter; labels and shapes are metadata and free to read. The
/// counters let an evaluation harness prove which images a training run
/// actually consumed.
#[derive(Debug)]
pub struct ImageDataset {
    image_side: usize,
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    accesses: Vec<AtomicU64>,
}

impl Clone for ImageDataset {
    fn clone(&self) -> Self {
        ImageDataset {
            image_side: self.image_side,
            images: self.images.clone(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            accesses: self
                .accesses
                .iter()
                .map(|a| AtomicU64::new(a.load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

impl ImageDataset {
    pub fn new(
        image_side: usize,
        images: Vec<Tensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [image_side, image_side, 3] {
                return Err(Error::Dimension(format!(
                    "image {i} has shape {:?}, expected [{image_side}, {image_side}, 3]",
                    img.shape()
                )));
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= class_names.len() {
                return Err(Error::Index(format!(
                    "label {l} of image {i} out of range for {} classes",
                    class_names.len()
                )));
            }
        }
        let accesses = (0..images.len()).map(|_| AtomicU64::new(0)).collect();
        Ok(ImageDataset {
            image_side,
            images,
            labels,
            class_names,
            accesses,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    /// Pixel access; counted.
    pub fn image(&self, i: usize) -> &Tensor {
        self.accesses[i].fetch_add(1, Ordering::Relaxed);
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn access_counts(&self) -> Vec<u64> {
        self.accesses
            .iter()
            .map(|a| a.load(Ordering::Relaxed))
            .collect()
    }

    pub fn reset_access_counts(&self) {
        for a in &self.accesses {
            a.store(0, Ordering::Relaxed);
        }
    }
}

fn pattern_on(texture: usize, cx: usize, cy: usize) -> bool {
    match texture % TEXTURES.len() {
        0 => cy % 2 == 0,
        1 => cx % 2 == 0 && cy % 2 == 0,
        2 => cx % 2 == 0,
        3 => (cx + cy) % 2 == 0,
        4 => (cx * cy) % 3 == 0,
        5 => cx % 3 == 0 && cy % 3 == 0,
        6 => (cx + 2 * cy) % 3 == 0,
        _ => (cx % 4 < 2) != (cy % 4 < 2),
    }
}

struct ClassFactors {
    texture: usize,
    tint: usize,
}

fn class_factors(class: usize, n_classes: usize, seed: u64) -> ClassFactors {
    let period = n_classes.min(4);
    let rot_t = (seed % TEXTURES.len() as u64) as usize;
    let rot_u = ((seed / 8) % TINTS.len() as u64) as usize;
    ClassFactors {
        texture: (class % period + rot_t) % TEXTURES.len(),
        tint: (class / period + rot_u) % TINTS.len(),
    }
}

fn class_name(f: &ClassFactors) -> String {
    format!("{} {}", TINTS[f.tint].0, TEXTURES[f.texture])
}

fn render_image(
    f: &ClassFactors,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let tint = TINTS[f.tint].1;
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let on = pattern_on(f.texture, x / PATTERN_CELL, y / PATTERN_CELL);
            let level = if on { 0.9 } else { 0.3 };
            for ch in 0..3 {
                let noise = (rng.gen::<f64>() - 0.5) * 0.12;
                data.push((tint[ch] * level + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![side, side, 3], data).expect("statically consistent shape")
}

fn record_text(
    idx: usize,
    class: &str,
    tint: &str,
    texture: &str,
    entities: &[String],
    attributes: &[String],
) -> String {
    let e1 = entities.get(1).unwrap_or(&entities[0]);
    let a1 = attributes.get(1).unwrap_or(&attributes[0]);
    match idx % N_H {
        0 => format!("a photo of a {class} with {tint} {texture} across its {e1}"),
        1 => format!("the {class} displays {tint} {texture} over a {a1} {e1}"),
        2 => format!("a {class} marked by {tint} {texture} and a {a1} {e1}"),
        3 => format!("this {class} carries {tint} {texture} along the {e1}"),
        _ => format!("an image of a {class} covered in {tint} {texture} with {a1} accents"),
    }
}

fn make_record(
    spec: &CorpusSpec,
    class: &str,
    f: &ClassFactors,
    idx: usize,
    rng: &mut ChaCha8Rng,
) -> DescriptionRecord {
    let texture = TEXTURES[f.texture];
    let tint = TINTS[f.tint].0;

    let mut entities = vec![texture.to_string()];
    entities.extend(
        FILLER_ENTITIES
            .choose_multiple(rng, spec.n_entities - 1)
            .map(|s| s.to_string()),
    );
    let mut attributes = vec![tint.to_string()];
    attributes.extend(
        FILLER_ATTRIBUTES
            .choose_multiple(rng, spec.n_attributes - 1)
            .map(|s| s.to_string()),
    );

    let mut e2e = Vec::new();
    for j in 1..entities.len().min(4) {
        e2e.push((entities[0].clone(), entities[j].clone()));
    }
    let mut e2a = vec![(entities[0].clone(), attributes[0].clone())];
    if attributes.len() > 1 {
        let anchor = entities.get(1).unwrap_or(&entities[0]);
        e2a.push((anchor.clone(), attributes[1].clone()));
    }

    DescriptionRecord {
        text: record_text(idx, class, tint, texture, &entities, &attributes),
        entities,
        attributes,
        e2e,
        e2a,
    }
}

/// Generate a seeded corpus: one procedural image set and one knowledge
/// bundle describing the same classes. Identical seeds give identical
/// output, bit for bit.
pub fn generate_synthetic_corpus(
    spec: &CorpusSpec,
    seed: u64,
) -> Result<(ImageDataset, KnowledgeBundle)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut categories = Vec::with_capacity(spec.n_classes);
    let mut class_names = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let f = class_factors(c, spec.n_classes, seed);
        let name = class_name(&f);
        let records = (0..N_H)
            .map(|i| make_record(spec, &name, &f, i, &mut rng))
            .collect();
        categories.push(CategoryEntry {
            class_name: name.clone(),
            records,
        });
        class_names.push(name);
    }
    let bundle = KnowledgeBundle {
        schema: crate::corpus::bundle::BUNDLE_SCHEMA,
        type_phrase: "types of patterned swatches".into(),
        n_descriptions: N_H,
        categories,
    };
    bundle.validate()?;

    let mut images = Vec::with_capacity(spec.n_classes * spec.n_images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.n_classes {
        let f = class_factors(c, spec.n_classes, seed);
        for _ in 0..spec.n_images_per_class {
            images.push(render_image(&f, spec.image_side, &mut rng));
            labels.push(c);
        }
    }
    let dataset = ImageDataset::new(spec.image_side, images, labels, class_names)?;
    Ok((dataset, bundle))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    image_side: usize,
    channels: usize,
    n_images: usize,
    labels: Vec<usize>,
    class_names: Vec<String>,
    data_file: String,
}

/// Write a dataset as `manifest.json` plus raw little-endian f64 planes.
pub fn save_dataset(dataset: &ImageDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema: 1,
        image_side: dataset.image_side,
        channels: 3,
        n_images: dataset.len(),
        labels: dataset.labels.clone(),
        class_names: dataset.class_names.clone(),
        data_file: "images.bin".into(),
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let mut bytes =
        Vec::with_capacity(dataset.len() * dataset.image_side * dataset.image_side * 3 * 8);
    for img in &dataset.images {
        for v in img.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join("images.bin"), bytes)?;
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`]. Access counters
/// start at zero.
pub fn load_dataset(dir: &Path) -> Result<ImageDataset> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| {
        Error::Format(format!("malformed dataset manifest: {e}"))
    })?;
    if manifest.schema != 1 {
        return Err(Error::Format(format!(
            "unsupported dataset schema {}",
            manifest.schema
        )));
    }
    if manifest.channels != 3 {
        return Err(Error::Format(format!(
            "unsupported channel count {}",
            manifest.channels
        )));
    }
    let bytes = std::fs::read(dir.join(&manifest.data_file))?;
    let per_image = manifest.image_side * manifest.image_side * 3;
    let expected = manifest.n_images * per_image * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset payload is {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(manifest.n_images);
    for i in 0..manifest.n_images {
        let start = i * per_image * 8;
        let data: Vec<f64> = bytes[start..start + per_image * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect();
        images.push(Tensor::new(
            vec![manifest.image_side, manifest.image_side, 3],
            data,
        )?);
    }
    ImageDataset::new(
        manifest.image_side,
        images,
        manifest.labels,
        manifest.class_names,
    )
}

/// Write a full corpus directory: dataset files plus `bundle.json`.
pub fn save_corpus(dataset: &ImageDataset, bundle: &KnowledgeBundle, dir: &Path) -> Result<()> {
    save_dataset(dataset, dir)?;
    let bytes = crate::corpus::bundle::serialize_bundle(bundle)?;
    std::fs::write(dir.join("bundle.json"), bytes)?;
    Ok(())
}

/// Load a full corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<(ImageDataset, KnowledgeBundle)> {
    let dataset = load_dataset(dir)?;
    let bundle_bytes = std::fs::read(dir.join("bundle.json"))?;
    let bundle = crate::corpus::bundle::parse_bundle(&bundle_bytes)?;
    Ok((dataset, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bundle::serialize_bundle;

    fn spec(n_classes: usize, n_images: usize, side: usize) -> CorpusSpec {
        CorpusSpec {
            n_classes,
            n_images_per_class: n_images,
            image_side: side,
            n_entities: 3,
            n_attributes: 2,
        }
    }

    #[test]
    fn cardinality_matches_spec() {
        let (ds, b) = generate_synthetic_corpus(&spec(2, 1, 8), 5).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(b.categories.len(), 2);
        assert_eq!(b.n_descriptions, N_H);
        assert_eq!(ds.class_names(), b.class_names().as_slice());
    }

    #[test]
    fn identical_seeds_give_identical_corpora() {
        let (ds1, b1) = generate_synthetic_corpus(&spec(3, 2, 8), 11).unwrap();
        let (ds2, b2) = generate_synthetic_corpus(&spec(3, 2, 8), 11).unwrap();
        assert_eq!(serialize_bundle(&b1).unwrap(), serialize_bundle(&b2).unwrap());
        assert_eq!(ds1.labels(), ds2.labels());
        for i in 0..ds1.len() {
            assert_eq!(ds1.image(i).data(), ds2.image(i).data());
        }

        let (ds3, _) = generate_synthetic_corpus(&spec(3, 2, 8), 12).unwrap();
        assert_ne!(ds1.image(0).data(), ds3.image(0).data());
    }

    #[test]
    fn generated_bundle_passes_validation_and_roundtrip() {
        let (_, b) = generate_synthetic_corpus(&spec(8, 1, 8), 3).unwrap();
        let bytes = serialize_bundle(&b).unwrap();
        let parsed = crate::corpus::bundle::parse_bundle(&bytes).unwrap();
        assert_eq!(parsed, b);
        for cat in &b.categories {
            for rec in &cat.records {
                assert!(!rec.e2e.is_empty());
                assert!(!rec.e2a.is_empty());
            }
        }
    }

    #[test]
    fn class_names_are_unique_over_grid() {
        let (_, b) = generate_synthetic_corpus(&spec(16, 1, 8), 9).unwrap();
        let names = b.class_names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn nearest_centroid_beats_chance() {
        let (ds, _) = generate_synthetic_corpus(&spec(4, 8, 16), 7).unwrap();
        let n_classes = ds.class_names().len();
        let dim = 16 * 16 * 3;
        let mut centroids = vec![vec![0.0; dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for i in 0..ds.len() {
            let c = ds.label(i);
            counts[c] += 1;
            for (acc, v) in centroids[c].iter_mut().zip(ds.image(i).data()) {
                *acc += v;
            }
        }
        for (c, cent) in centroids.iter_mut().enumerate() {
            for v in cent.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = ds.image(i).data();
            let best = (0..n_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(img)
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(img)
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    da.total_cmp(&db)
                })
                .expect("nonempty classes");
            if best == ds.label(i) {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.25, "nearest-centroid accuracy {acc} not above chance");
    }

    #[test]
    fn dataset_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, b) = generate_synthetic_corpus(&spec(2, 2, 8), 21).unwrap();
        save_corpus(&ds, &b, dir.path()).unwrap();
        let (ds2, b2) = load_corpus(dir.path()).unwrap();
        assert_eq!(b2, b);
        assert_eq!(ds2.labels(), ds.labels());
        assert_eq!(ds2.class_names(), ds.class_names());
        assert_eq!(ds2.access_counts(), vec![0; ds.len()]);
        for i in 0..ds.len() {
            assert_eq!(ds2.image(i).data(), ds.image(i).data());
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = generate_synthetic_corpus(&spec(2, 1, 8), 2).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let bin = dir.path().join("images.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn access_counters_track_reads() {
        let (ds, _) = generate_synthetic_corpus(&spec(2, 2, 8), 2).unwrap();
        assert_eq!(ds.access_counts(), vec![0, 0, 0, 0]);
        ds.image(1);
        ds.image(1);
        ds.image(3);
        assert_eq!(ds.access_counts(), vec![0, 2, 0, 1]);
        ds.reset_access_counts();
        assert_eq!(ds.access_counts(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let cases = [
            spec(0, 1, 8),
            spec(2, 0, 8),
            spec(2, 1, 10),
            spec(33, 1, 8),
            CorpusSpec { n_entities: 10, ..spec(2, 1, 8) },
            CorpusSpec { n_attributes: 10, ..spec(2, 1, 8) },
        ];
        for s in cases {
            assert!(
                generate_synthetic_corpus(&s, 0).is_err(),
                "accepted invalid spec {s:?}"
            );
        }
    }
}
