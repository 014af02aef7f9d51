//! `.vvol` volume files and dataset manifests.
//!
//! A `.vvol` file is a small text header; voxel data lives in a raw
//! little-endian file next to it:
//!
//! ```text
//! VVOL1
//! dtype = f32
//! channels = 2
//! extents = 48,64,64
//! spacing = 1,1,3
//! channel_names = T1,T1_enh
//! byte_order = little
//! data = case01.raw
//! ```
//!
//! Label volumes use `dtype = u8`, one channel, and an extra `num_classes` key.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::volume::{check_extents, LabelVolume, Volume};

pub const MAGIC: &str = "VVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VVolHeader {
    pub dtype: DType,
    pub channels: usize,
    pub extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub channel_names: Vec<String>,
    pub num_classes: Option<usize>,
    /// Data file, relative to the header's directory.
    pub data: PathBuf,
}

impl VVolHeader {
    /// Payload size in bytes, or an error if it does not fit in `usize`.
    pub fn byte_len(&self) -> Result<usize> {
        self.extents
            .iter()
            .try_fold(self.channels, |acc, &e| acc.checked_mul(e))
            .and_then(|v| v.checked_mul(self.dtype.size()))
            .ok_or_else(|| Error::invalid("declared volume size overflows"))
    }

    fn to_text(&self) -> String {
        let mut s = format!(
            "{MAGIC}\ndtype = {}\nchannels = {}\nextents = {}\nspacing = {}\nchannel_names = {}\nbyte_order = little\n",
            self.dtype.name(),
            self.channels,
            join(&self.extents),
            join(&self.spacing_mm),
            self.channel_names.join(","),
        );
        if let Some(c) = self.num_classes {
            s += &format!("num_classes = {c}\n");
        }
        s += &format!("data = {}\n", self.data.display());
        s
    }
}

fn three<T: Copy>(v: Vec<T>, key: &str, path: &Path) -> Result<[T; 3]> {
    v.try_into()
        .map_err(|_| Error::format(path, format!("`{key}` needs exactly three values")))
}

pub fn read_header(path: &Path) -> Result<VVolHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if first.trim() != MAGIC {
        return Err(Error::format(path, format!("bad magic `{}`, expected {MAGIC}", first.trim())));
    }
    let kv = KvMap::parse(rest, path)?;
    let dtype = match kv.require("dtype")? {
        "f32" => DType::F32,
        "u8" => DType::U8,
        other => return Err(Error::format(path, format!("unsupported dtype `{other}`"))),
    };
    if kv.require("byte_order")? != "little" {
        return Err(Error::format(path, "only little-endian data is supported"));
    }
    let channels: usize = kv.parse_required("channels")?;
    let channel_names: Vec<String> = kv.list("channel_names")?;
    if channel_names.len() != channels {
        return Err(Error::format(
            path,
            format!("{} channel names for {channels} channels", channel_names.len()),
        ));
    }
    let header = VVolHeader {
        dtype,
        channels,
        extents: three(kv.list("extents")?, "extents", path)?,
        spacing_mm: three(kv.list("spacing")?, "spacing", path)?,
        channel_names,
        num_classes: kv.get("num_classes")?,
        data: PathBuf::from(kv.require("data")?),
    };
    header.byte_len()?;
    Ok(header)
}

fn data_path(header_path: &Path, header: &VVolHeader) -> PathBuf {
    header_path.parent().unwrap_or(Path::new(".")).join(&header.data)
}

fn read_payload(path: &Path, header: &VVolHeader) -> Result<Vec<u8>> {
    let expected = header.byte_len()?;
    let data = data_path(path, header);
    let actual = fs::metadata(&data)
        .map_err(|e| Error::io(format!("reading {}", data.display()), e))?
        .len();
    if actual != expected as u64 {
        return Err(Error::format(
            &data,
            format!("expected {expected} bytes of voxel data, found {actual}"),
        ));
    }
    fs::read(&data).map_err(|e| Error::io(format!("reading {}", data.display()), e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum VVolData {
    Image(Volume),
    Labels(LabelVolume),
}

pub fn read_vvol(path: &Path) -> Result<VVolData> {
    let header = read_header(path)?;
    let bytes = read_payload(path, &header)?;
    match header.dtype {
        DType::F32 => {
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(VVolData::Image(Volume::new(
                header.extents,
                header.spacing_mm,
                header.channel_names,
                data,
            )?))
        }
        DType::U8 => {
            if header.channels != 1 {
                return Err(Error::format(path, "label volumes have exactly one channel"));
            }
            let classes = match header.num_classes {
                Some(c) => c,
                None => bytes.iter().copied().max().map_or(1, |m| m as usize + 1),
            };
            Ok(VVolData::Labels(LabelVolume::new(
                header.extents,
                header.spacing_mm,
                classes,
                bytes,
            )?))
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_vvol(path)? {
        VVolData::Image(v) => Ok(v),
        VVolData::Labels(_) => Err(Error::format(path, "expected an f32 image volume, found labels")),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_vvol(path)? {
        VVolData::Labels(l) => Ok(l),
        VVolData::Image(_) => Err(Error::format(path, "expected a u8 label volume, found f32 data")),
    }
}

fn raw_name(path: &Path) -> Result<PathBuf> {
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut name = stem.to_os_string();
    name.push(".raw");
    Ok(PathBuf::from(name))
}

fn write_pair(path: &Path, header: &VVolHeader, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let data = data_path(path, header);
    fs::write(&data, bytes).map_err(|e| Error::io(format!("writing {}", data.display()), e))?;
    fs::write(path, header.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `path` (header) and `<stem>.raw` beside it.
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    if let Some(bad) = vol
        .channel_names()
        .iter()
        .find(|n| n.is_empty() || n.contains(|c: char| c.is_whitespace() || c == ',' || c == '#'))
    {
        return Err(Error::invalid(format!("channel name `{bad}` must be non-empty without spaces, commas or #")));
    }
    let header = VVolHeader {
        dtype: DType::F32,
        channels: vol.channels(),
        extents: vol.extents(),
        spacing_mm: vol.spacing(),
        channel_names: vol.channel_names().to_vec(),
        num_classes: None,
        data: raw_name(path)?,
    };
    let bytes: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &header, &bytes)
}

pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let header = VVolHeader {
        dtype: DType::U8,
        channels: 1,
        extents: labels.extents(),
        spacing_mm: labels.spacing(),
        channel_names: vec!["labels".to_string()],
        num_classes: Some(labels.num_classes()),
        data: raw_name(path)?,
    };
    write_pair(path, &header, labels.data())
}

/// One case of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub id: String,
    pub spacing_mm: [f64; 3],
    pub label: Option<PathBuf>,
    /// `(modality name, path)` in channel order.
    pub modalities: Vec<(String, PathBuf)>,
}

/// Case list with paths relative to `dir`. One line per case:
/// `<id> spacing=a,b,c [label=path] <modality>=path ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub cases: Vec<CaseEntry>,
}

fn parse_spacing(v: &str, path: &Path) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::format(path, format!("bad spacing `{v}`"))))
        .collect::<Result<_>>()?;
    three(parts, "spacing", path)
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cases: Vec<CaseEntry> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let id = tokens.next().expect("line is non-empty").to_string();
            if cases.iter().any(|c| c.id == id) {
                return Err(Error::format(path, format!("line {}: duplicate case `{id}`", n + 1)));
            }
            let mut entry = CaseEntry {
                id,
                spacing_mm: [1.0; 3],
                label: None,
                modalities: Vec::new(),
            };
            let mut has_spacing = false;
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::format(path, format!("line {}: expected key=value, got `{tok}`", n + 1)))?;
                match k {
                    "spacing" => {
                        entry.spacing_mm = parse_spacing(v, path)?;
                        has_spacing = true;
                    }
                    "label" => entry.label = Some(PathBuf::from(v)),
                    _ => entry.modalities.push((k.to_string(), PathBuf::from(v))),
                }
            }
            if !has_spacing {
                return Err(Error::format(path, format!("line {}: missing spacing", n + 1)));
            }
            if entry.modalities.is_empty() {
                return Err(Error::format(path, format!("line {}: no modality volumes", n + 1)));
            }
            cases.push(entry);
        }
        if cases.is_empty() {
            return Err(Error::format(path, "manifest lists no cases"));
        }
        Ok(Self {
            dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            cases,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# id spacing=D,H,W [label=path] modality=path ...\n");
        for c in &self.cases {
            s += &format!("{} spacing={}", c.id, join(&c.spacing_mm));
            if let Some(l) = &c.label {
                s += &format!(" label={}", l.display());
            }
            for (m, p) in &c.modalities {
                s += &format!(" {m}={}", p.display());
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    pub fn case(&self, id: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::invalid(format!("no case `{id}` in manifest")))
    }

    /// Checks headers only: files exist and agree on extents and spacing per case.
    pub fn validate(&self) -> Result<()> {
        for case in &self.cases {
            let mut extents = None;
            let paths = case.modalities.iter().map(|(_, p)| p).chain(case.label.iter());
            for p in paths {
                let path = self.resolve(p);
                let h = read_header(&path)?;
                if h.spacing_mm != case.spacing_mm {
                    return Err(Error::format(
                        &path,
                        format!("spacing {:?} differs from the manifest's {:?}", h.spacing_mm, case.spacing_mm),
                    ));
                }
                match extents {
                    None => extents = Some(h.extents),
                    Some(e) => check_extents(e, h.extents)
                        .map_err(|err| Error::format(&path, format!("case {}: {err}", case.id)))?,
                }
            }
        }
        Ok(())
    }

    /// Channel-concatenation of the case's modality volumes.
    pub fn load_input(&self, case: &CaseEntry) -> Result<Volume> {
        let vols = case
            .modalities
            .iter()
            .map(|(_, p)| read_volume(&self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        Volume::concat(&vols.iter().collect::<Vec<_>>())
    }

    /// Modality volumes one by one, each renamed after its manifest key when single-channel.
    pub fn load_modalities(&self, case: &CaseEntry) -> Result<Vec<Volume>> {
        case.modalities
            .iter()
            .map(|(name, p)| {
                let v = read_volume(&self.resolve(p))?;
                Ok(if v.channels() == 1 { v.renamed(vec![name.clone()]) } else { v })
            })
            .collect()
    }

    pub fn load_labels(&self, case: &CaseEntry) -> Result<LabelVolume> {
        let p = case
            .label
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("case {} has no label volume", case.id)))?;
        read_labels(&self.resolve(p))
    }

    /// Every case as an `(input, labels)` pair.
    pub fn load_training_set(&self) -> Result<Vec<(Volume, LabelVolume)>> {
        self.validate()?;
        self.cases
            .iter()
            .map(|c| Ok((self.load_input(c)?, self.load_labels(c)?)))
            .collect()
    }
}
