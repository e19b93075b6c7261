//! On-disk formats: logits JSON-lines, MOODIMG1 image containers, PNG
//! directories, MOODNET1 weights, calibration profiles, cost models and
//! per-sample outcome streams.
//!
//! All readers are single-pass iterators and hold at most one record at a
//! time.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::complexity::{decode_png, ImageBuffer};
use crate::detector::DetectionOutcome;
use crate::error::{MoodError, Result};
use crate::exitnet::{ExitCostModel, ExitNetWeights, NetFormatError};
use crate::scoring::{CalibrationProfile, LogitsRecord};

pub const IMAGE_MAGIC: &[u8; 8] = b"MOODIMG1";

/// First line of a logits file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitsFileHeader {
    pub k: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub model_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<u64>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| MoodError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| MoodError::io(path, e))
}

/// Streaming reader over a logits JSON-lines file.
pub struct LogitsReader {
    path: PathBuf,
    input: BufReader<File>,
    header: LogitsFileHeader,
    line_no: u64,
    buf: String,
}

impl LogitsReader {
    pub fn header(&self) -> &LogitsFileHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn next_line(&mut self) -> Option<Result<&str>> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line_no += 1;
                    if !self.buf.trim().is_empty() {
                        return Some(Ok(self.buf.trim()));
                    }
                }
                Err(e) => return Some(Err(MoodError::io(&self.path, e))),
            }
        }
    }
}

impl Iterator for LogitsReader {
    type Item = Result<LogitsRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.next_line()? {
            Ok(line) => line,
            Err(e) => return Some(Err(e)),
        };
        let record: LogitsRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                return Some(Err(MoodError::Parse {
                    path: self.path.clone(),
                    line: self.line_no,
                    message: e.to_string(),
                }))
            }
        };
        if let Err(e) = record.validate(self.header.k, self.header.num_classes) {
            return Some(Err(MoodError::schema(
                &self.path,
                format!("line {}: {}", self.line_no, e),
            )));
        }
        Some(Ok(record))
    }
}

/// Opens a logits file and parses its header line.
pub fn read_logits(path: impl AsRef<Path>) -> Result<LogitsReader> {
    let path = path.as_ref().to_path_buf();
    let input = BufReader::new(open(&path)?);
    let mut reader = LogitsReader {
        path,
        input,
        header: LogitsFileHeader {
            k: 0,
            num_classes: 0,
            model_tag: String::new(),
            sample_count: None,
        },
        line_no: 0,
        buf: String::new(),
    };
    let header: LogitsFileHeader = match reader.next_line() {
        None => return Err(MoodError::schema(&reader.path, "empty file, missing header line")),
        Some(Err(e)) => return Err(e),
        Some(Ok(line)) => serde_json::from_str(line).map_err(|e| MoodError::Parse {
            path: reader.path.clone(),
            line: reader.line_no,
            message: format!("invalid header: {e}"),
        })?,
    };
    if header.k == 0 || header.num_classes == 0 {
        return Err(MoodError::schema(
            &reader.path,
            "header k and num_classes must be positive",
        ));
    }
    reader.header = header;
    Ok(reader)
}

pub struct LogitsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: LogitsFileHeader,
}

impl LogitsWriter {
    pub fn create(path: impl AsRef<Path>, header: LogitsFileHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = create(&path)?;
        let line = serde_json::to_string(&header).expect("header serializes");
        writeln!(out, "{line}").map_err(|e| MoodError::io(&path, e))?;
        Ok(Self { path, out, header })
    }

    pub fn write(&mut self, record: &LogitsRecord) -> Result<()> {
        record.validate(self.header.k, self.header.num_classes)?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| MoodError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| MoodError::io(&self.path, e))
    }
}

/// Stream of `(sample_id, image)` pairs.
pub enum ImageReader {
    Container {
        path: PathBuf,
        input: BufReader<File>,
        count: u32,
        next: u32,
    },
    Directory {
        files: std::vec::IntoIter<(String, PathBuf)>,
    },
}

impl ImageReader {
    /// Number of images, when known up front.
    pub fn len_hint(&self) -> usize {
        match self {
            ImageReader::Container { count, next, .. } => (count - next) as usize,
            ImageReader::Directory { files } => files.len(),
        }
    }

    fn read_container_image(
        path: &Path,
        input: &mut BufReader<File>,
        index: u32,
    ) -> Result<ImageBuffer> {
        let mut head = [0u8; 5];
        read_exact(input, &mut head, path, &format!("header of image {index}"))?;
        let height = u16::from_le_bytes([head[0], head[1]]);
        let width = u16::from_le_bytes([head[2], head[3]]);
        let channels = head[4];
        let len = height as usize * width as usize * channels as usize;
        let mut pixels = vec![0u8; len];
        read_exact(input, &mut pixels, path, &format!("pixels of image {index}"))?;
        ImageBuffer::new(height, width, channels, pixels)
            .map_err(|e| MoodError::schema(path, format!("image {index}: {e}")))
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => MoodError::Truncated {
            path: path.to_path_buf(),
            what: what.to_string(),
        },
        _ => MoodError::io(path, e),
    })
}

impl Iterator for ImageReader {
    type Item = Result<(String, ImageBuffer)>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            ImageReader::Container {
                path,
                input,
                count,
                next,
            } => {
                if *next >= *count {
                    return None;
                }
                let index = *next;
                *next += 1;
                let item = Self::read_container_image(path, input, index)
                    .map(|img| (index.to_string(), img));
                if item.is_err() {
                    *next = *count;
                }
                Some(item)
            }
            ImageReader::Directory { files } => {
                let (id, path) = files.next()?;
                let item = fs::read(&path)
                    .map_err(|e| MoodError::io(&path, e))
                    .and_then(|bytes| {
                        decode_png(&bytes).map_err(|message| MoodError::PngDecode {
                            path: path.clone(),
                            message,
                        })
                    })
                    .map(|img| (id, img));
                Some(item)
            }
        }
    }
}

/// Opens a MOODIMG1 container or a directory of `.png` files.
///
/// Container images get ids `"0"`, `"1"`, ...; directory images are keyed by
/// filename stem and visited in lexicographic order.
pub fn read_images(path: impl AsRef<Path>) -> Result<ImageReader> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| MoodError::io(path, e))?;
    if meta.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| MoodError::io(path, e))? {
            let entry = entry.map_err(|e| MoodError::io(path, e))?;
            let p = entry.path();
            let is_png = p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png && p.is_file() {
                let stem = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| MoodError::schema(&p, "file name is not valid UTF-8"))?
                    .to_string();
                files.push((stem, p));
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(MoodError::schema(path, "directory contains no PNG files"));
        }
        return Ok(ImageReader::Directory {
            files: files.into_iter(),
        });
    }

    let mut input = BufReader::new(open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic, path, "magic")?;
    if &magic != IMAGE_MAGIC {
        return Err(MoodError::BadMagic {
            path: path.to_path_buf(),
            expected: "MOODIMG1",
        });
    }
    let mut count = [0u8; 4];
    read_exact(&mut input, &mut count, path, "image count")?;
    Ok(ImageReader::Container {
        path: path.to_path_buf(),
        input,
        count: u32::from_le_bytes(count),
        next: 0,
    })
}

/// Writes a MOODIMG1 container.
pub fn write_images<'a, I>(path: impl AsRef<Path>, images: I) -> Result<()>
where
    I: IntoIterator<Item = &'a ImageBuffer>,
    I::IntoIter: ExactSizeIterator,
{
    let path = path.as_ref();
    let images = images.into_iter();
    let count = u32::try_from(images.len())
        .map_err(|_| MoodError::input("too many images for one container"))?;
    let mut out = create(path)?;
    let io = |e| MoodError::io(path, e);
    out.write_all(IMAGE_MAGIC).map_err(io)?;
    out.write_all(&count.to_le_bytes()).map_err(io)?;
    for img in images {
        out.write_all(&img.height().to_le_bytes()).map_err(io)?;
        out.write_all(&img.width().to_le_bytes()).map_err(io)?;
        out.write_all(&[img.channels()]).map_err(io)?;
        out.write_all(img.pixels()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    profile.validate()?;
    write_json(profile, path)
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let path = path.as_ref();
    let profile: CalibrationProfile = read_json(path)?;
    profile
        .validate()
        .map_err(|e| MoodError::schema(path, e.to_string()))?;
    Ok(profile)
}

pub fn write_cost_model(costs: &ExitCostModel, path: impl AsRef<Path>) -> Result<()> {
    write_json(costs, path.as_ref())
}

pub fn read_cost_model(path: impl AsRef<Path>) -> Result<ExitCostModel> {
    read_json(path.as_ref())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| MoodError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MoodError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MoodError::schema(path, e.to_string()))
}

pub fn write_weights(weights: &ExitNetWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights.to_bytes()).map_err(|e| MoodError::io(path, e))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ExitNetWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MoodError::io(path, e))?;
    ExitNetWeights::from_bytes(&bytes).map_err(|e| match e {
        NetFormatError::BadMagic => MoodError::BadMagic {
            path: path.to_path_buf(),
            expected: "MOODNET1",
        },
        NetFormatError::Truncated(what) => MoodError::Truncated {
            path: path.to_path_buf(),
            what: what.to_string(),
        },
        NetFormatError::Invalid(msg) => MoodError::schema(path, msg),
    })
}

/// JSON-lines writer for detection outcomes.
pub struct OutcomeWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl OutcomeWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let out = create(&path)?;
        Ok(Self { path, out })
    }

    pub fn write(&mut self, outcome: &DetectionOutcome) -> Result<()> {
        let line = serde_json::to_string(outcome).expect("outcome serializes");
        writeln!(self.out, "{line}").map_err(|e| MoodError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| MoodError::io(&self.path, e))
    }
}

pub fn read_outcomes(path: impl AsRef<Path>) -> Result<Vec<DetectionOutcome>> {
    let path = path.as_ref();
    let input = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| MoodError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MoodError::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
