use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::corpus::{Annotation, BBox, Corpus, CorpusConfig, GroundedPair, Replacement, Span, Split};
use super::vocab::Vocabulary;
use crate::encoders::ImageInput;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: CorpusConfig,
    vocabulary: Vec<String>,
    items: Vec<Item>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "kebab-case")]
enum ImageBlob {
    /// Little-endian float64 values, base64 encoded.
    Base64F64le { shape: [usize; 3], data: String },
    Inline { shape: [usize; 3], data: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    class: usize,
    class_name: String,
    bbox: [usize; 4],
    span: [usize; 2],
    #[serde(default = "yes")]
    single_instance: bool,
}

fn yes() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct Item {
    id: String,
    seed: u64,
    split: Split,
    image: ImageBlob,
    caption: Vec<String>,
    annotations: Vec<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    replacement: Option<Replacement>,
}

fn encode_image(img: &ImageInput) -> ImageBlob {
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    ImageBlob::Base64F64le {
        shape: [img.height(), img.width(), img.features()],
        data: STANDARD.encode(bytes),
    }
}

fn decode_image(blob: ImageBlob) -> Result<ImageInput> {
    let (shape, data) = match blob {
        ImageBlob::Inline { shape, data } => (shape, data),
        ImageBlob::Base64F64le { shape, data } => {
            let bytes = STANDARD
                .decode(data)
                .map_err(|e| Error::Format(format!("image base64: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Format("image payload not a multiple of 8 bytes".into()));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (shape, values)
        }
    };
    ImageInput::new(shape[0], shape[1], shape[2], data)
}

pub fn manifest_to_json(corpus: &Corpus) -> Result<String> {
    let items = corpus
        .items
        .iter()
        .map(|p| Item {
            id: p.id.clone(),
            seed: p.seed,
            split: p.split,
            image: encode_image(&p.image),
            caption: p.tokens.clone(),
            annotations: p
                .annotations
                .iter()
                .map(|a| AnnotationRecord {
                    class: a.class,
                    class_name: a.class_name.clone(),
                    bbox: [a.bbox.row0, a.bbox.col0, a.bbox.row1, a.bbox.col1],
                    span: [a.span.start, a.span.end],
                    single_instance: a.single_instance,
                })
                .collect(),
            replacement: p.replacement.clone(),
        })
        .collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: corpus.config.clone(),
        vocabulary: corpus.vocabulary.words().to_vec(),
        items,
    };
    Ok(serde_json::to_string_pretty(&manifest)?)
}

pub fn manifest_from_json(text: &str) -> Result<Corpus> {
    #[derive(Deserialize)]
    struct VersionProbe {
        version: u32,
    }
    let probe: VersionProbe =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest schema: {e}")))?;
    if probe.version != MANIFEST_VERSION {
        return Err(Error::Version {
            expected: MANIFEST_VERSION,
            found: probe.version,
        });
    }
    let manifest: Manifest =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest schema: {e}")))?;
    let vocabulary = Vocabulary::new(manifest.vocabulary)?;
    let items = manifest
        .items
        .into_iter()
        .map(|it| {
            let caption = vocabulary.encode(&it.caption)?;
            let pair = GroundedPair {
                id: it.id,
                seed: it.seed,
                split: it.split,
                image: decode_image(it.image)?,
                tokens: it.caption,
                caption,
                annotations: it
                    .annotations
                    .into_iter()
                    .map(|a| Annotation {
                        class: a.class,
                        class_name: a.class_name,
                        bbox: BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
                        span: Span::new(a.span[0], a.span[1]),
                        single_instance: a.single_instance,
                    })
                    .collect(),
                replacement: it.replacement,
            };
            pair.validate()?;
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: manifest.config,
        vocabulary,
        items,
    })
}

pub fn save_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, manifest_to_json(corpus)?)?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    manifest_from_json(&std::fs::read_to_string(path)?)
}
