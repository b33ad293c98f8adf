//! Synthetic captioned shapes, rendered directly at every stage resolution.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use drgan_autograd::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::fnv1a;
use crate::text_encoding::{tokenize, Caption, Vocab};

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
});
word_enum!(Size { Small => "small", Large => "large" });
word_enum!(Background { Dark => "dark", Gray => "gray", Light => "light" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [220.0, 30.0, 30.0],
            Color::Green => [30.0, 180.0, 50.0],
            Color::Blue => [30.0, 70.0, 225.0],
            Color::Yellow => [235.0, 215.0, 30.0],
            Color::Purple => [150.0, 50.0, 190.0],
            Color::Orange => [245.0, 135.0, 20.0],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::Dark => [35.0; 3],
            Background::Gray => [128.0; 3],
            Background::Light => [220.0; 3],
        }
    }
}

impl Size {
    /// Shape radius as a fraction of the canvas side.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 0.2,
            Size::Large => 0.34,
        }
    }
}

/// One scene. `offset` shifts the shape centre, in canvas fractions, so
/// scenes with the same caption still differ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub background: Background,
    pub offset: [f64; 2],
}

pub const MAX_OFFSET: f64 = 0.12;
const SUPERSAMPLE: usize = 4;

impl SceneSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let pick = |rng: &mut R, n: usize| rng.random_range(0..n);
        Self {
            shape: Shape::ALL[pick(rng, Shape::ALL.len())],
            color: Color::ALL[pick(rng, Color::ALL.len())],
            size: Size::ALL[pick(rng, Size::ALL.len())],
            background: Background::ALL[pick(rng, Background::ALL.len())],
            offset: [
                rng.random_range(-MAX_OFFSET..MAX_OFFSET),
                rng.random_range(-MAX_OFFSET..MAX_OFFSET),
            ],
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} on a {} background",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            self.background.word()
        )
    }

    /// Whether the point `(x, y)` (canvas fractions) lies inside the shape.
    fn covers(&self, x: f64, y: f64) -> bool {
        let r = self.size.radius();
        let dx = x - 0.5 - self.offset[0];
        let dy = y - 0.5 - self.offset[1];
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up; base at dy = 0.8 r
                let (top, base, half) = (-r, 0.8 * r, 0.95 * r);
                dy >= top && dy <= base && dx.abs() <= half * (dy - top) / (base - top)
            }
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
        }
    }

    /// RGB bytes, row-major `[res, res, 3]`, with 4×4 supersampling.
    pub fn render(&self, res: usize) -> Vec<u8> {
        let fg = self.color.rgb();
        let bg = self.background.rgb();
        let n = SUPERSAMPLE * SUPERSAMPLE;
        let mut out = Vec::with_capacity(res * res * 3);
        for py in 0..res {
            for px in 0..res {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / res as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / res as f64;
                        hits += self.covers(x, y) as usize;
                    }
                }
                let a = hits as f64 / n as f64;
                for ch in 0..3 {
                    out.push((a * fg[ch] + (1.0 - a) * bg[ch]).round() as u8);
                }
            }
        }
        out
    }
}

/// Vocabulary covering every caption the template can produce.
pub fn template_vocab() -> Vocab {
    let mut words = vec!["a on background".to_string()];
    words.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
    words.extend(Color::ALL.iter().map(|s| s.word().to_string()));
    words.extend(Size::ALL.iter().map(|s| s.word().to_string()));
    words.extend(Background::ALL.iter().map(|s| s.word().to_string()));
    Vocab::from_words(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub caption: String,
    /// Known for generated data; absent for external directories that only
    /// provide captions.
    pub spec: Option<SceneSpec>,
    /// RGB bytes per stage resolution.
    pub images: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolutions: Vec<usize>,
    pub samples: Vec<Sample>,
}

/// Images in `[−1, 1]` per stage, `[B, 3, r, r]`, plus tokenized captions.
pub struct Batch<T> {
    pub images: Vec<Tensor<T>>,
    pub captions: Vec<Caption>,
    /// Caption-text hash per sample; equal keys mean equal captions.
    pub keys: Vec<u64>,
}

pub fn generate_dataset(n: usize, seed: u64, resolutions: &[usize]) -> Dataset {
    assert!(n >= 1, "empty dataset requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let spec = SceneSpec::random(&mut rng);
            Sample {
                id: format!("{i:05}"),
                caption: spec.caption(),
                spec: Some(spec),
                images: resolutions.iter().map(|&r| spec.render(r)).collect(),
            }
        })
        .collect();
    Dataset {
        resolutions: resolutions.to_vec(),
        samples,
    }
}

const MANIFEST_HEADER: [&str; 8] = ["id", "caption", "shape", "color", "size", "background", "dx", "dy"];

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<&str> = self.samples.iter().map(|s| s.caption.as_str()).collect();
        let tv = template_vocab();
        words.extend(tv.tokens().iter().skip(2).map(String::as_str));
        Vocab::from_words(words)
    }

    pub fn load_batch<T: Float>(&self, indices: &[usize], vocab: &Vocab, t_max: usize) -> Result<Batch<T>> {
        let mut images: Vec<Vec<T>> = vec![Vec::new(); self.resolutions.len()];
        let mut captions = Vec::with_capacity(indices.len());
        let mut keys = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or(Error::BadIndex {
                index: i,
                len: self.len(),
            })?;
            for (k, &r) in self.resolutions.iter().enumerate() {
                images[k].extend(to_chw::<T>(&s.images[k], r));
            }
            captions.push(tokenize(&s.caption, vocab, t_max)?);
            keys.push(fnv1a(s.caption.as_bytes()));
        }
        let b = indices.len();
        Ok(Batch {
            images: images
                .into_iter()
                .zip(&self.resolutions)
                .map(|(d, &r)| Tensor::new(&[b, 3, r, r], d))
                .collect(),
            captions,
            keys,
        })
    }

    /// Writes `manifest.tsv`, `vocab.tsv` and `{id}_{res}.png` files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(dir.join("manifest.tsv"))
            .map_err(|e| Error::format("manifest", e))?;
        w.write_record(MANIFEST_HEADER)
            .map_err(|e| Error::format("manifest", e))?;
        for s in &self.samples {
            let mut rec = vec![s.id.clone(), s.caption.clone()];
            match &s.spec {
                Some(sp) => rec.extend([
                    sp.shape.word().to_string(),
                    sp.color.word().to_string(),
                    sp.size.word().to_string(),
                    sp.background.word().to_string(),
                    format!("{:.6}", sp.offset[0]),
                    format!("{:.6}", sp.offset[1]),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), 6)),
            }
            w.write_record(&rec).map_err(|e| Error::format("manifest", e))?;
            for (img, &r) in s.images.iter().zip(&self.resolutions) {
                write_png(&dir.join(format!("{}_{r}.png", s.id)), img, r, r)?;
            }
        }
        w.flush()?;
        fs::write(dir.join("vocab.tsv"), self.vocab().to_tsv())?;
        Ok(())
    }

    /// Reads a directory in the layout written by [`Dataset::save`]. Only
    /// the `id` and `caption` columns are required.
    pub fn load(dir: &Path, resolutions: &[usize]) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(dir.join("manifest.tsv"))
            .map_err(|e| Error::format("manifest", e))?;
        let header = rd.headers().map_err(|e| Error::format("manifest", e))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (id_col, cap_col) = match (col("id"), col("caption")) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::format("manifest", "needs `id` and `caption` columns")),
        };
        let mut samples = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::format("manifest", e))?;
            let field = |name: &str| col(name).and_then(|c| rec.get(c)).unwrap_or("");
            let id = rec.get(id_col).unwrap_or("").to_string();
            let caption = rec.get(cap_col).unwrap_or("").to_string();
            let spec = (|| {
                Some(SceneSpec {
                    shape: Shape::parse(field("shape"))?,
                    color: Color::parse(field("color"))?,
                    size: Size::parse(field("size"))?,
                    background: Background::parse(field("background"))?,
                    offset: [field("dx").parse().ok()?, field("dy").parse().ok()?],
                })
            })();
            let images = resolutions
                .iter()
                .map(|&r| read_png(&dir.join(format!("{id}_{r}.png")), r))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                caption,
                spec,
                images,
            });
        }
        Ok(Self {
            resolutions: resolutions.to_vec(),
            samples,
        })
    }
}

/// HWC bytes → CHW values in `[−1, 1]`.
pub fn to_chw<T: Float>(rgb: &[u8], res: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 3 * res * res];
    for p in 0..res * res {
        for c in 0..3 {
            out[c * res * res + p] = T::lit(rgb[p * 3 + c] as f64 / 127.5 - 1.0);
        }
    }
    out
}

/// CHW values in `[−1, 1]` → HWC bytes.
pub fn to_rgb<T: Float>(chw: &[T], res: usize) -> Vec<u8> {
    let mut out = vec![0u8; 3 * res * res];
    for p in 0..res * res {
        for c in 0..3 {
            let v = (chw[c * res * res + p].as_f64() + 1.0) * 127.5;
            out[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::format("png", e))?;
    w.write_image_data(rgb).map_err(|e| Error::format("png", e))?;
    w.finish().map_err(|e| Error::format("png", e))?;
    Ok(())
}

pub fn read_png(path: &Path, res: usize) -> Result<Vec<u8>> {
    let file = fs::File::open(path)?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format("png", e))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::format("png", "image too large"))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e))?;
    if info.width as usize != res || info.height as usize != res {
        return Err(Error::format(
            "png",
            format!(
                "{} is {}×{}, expected {res}×{res}",
                path.display(),
                info.width,
                info.height
            ),
        ));
    }
    let px = res * res;
    let bytes = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::format("png", "palette not expanded")),
    };
    debug_assert_eq!(rgb.len(), px * 3);
    Ok(rgb)
}
