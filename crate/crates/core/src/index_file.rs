//! Single-file, sectioned, versioned persistence for a [`Pipeline`].
//!
//! ```text
//! magic    8 bytes  "ANNPIDX\0"
//! version  u32      FORMAT_VERSION
//! sections u32      number of sections that follow
//! section  tag[4] | payload length u64 | crc32(payload) u32 | payload
//! ```
//!
//! All integers and floats are little-endian. Sections: `HEAD` (counts,
//! max degree, entry, search defaults), `VECS` (indexed vectors), `IDS_`
//! (original ids, optional), `ADJ_` (CSR offsets, flat neighbor ids,
//! repaired nodes), `PCA_` and `SEL_` (optional).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::VectorSet;
use crate::entrypoint::EntryPointSelector;
use crate::error::{Error, Result};
use crate::graph::GraphIndex;
use crate::pca::PcaModel;
use crate::pipeline::Pipeline;

pub const MAGIC: &[u8; 8] = b"ANNPIDX\0";
pub const FORMAT_VERSION: u32 = 1;

/// Search defaults stored next to the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoredSearch {
    pub k: usize,
    pub pool_size: usize,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        for v in vs {
            self.u32(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], section: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            section,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::section(self.section, "payload is truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&self, n: u64, width: usize) -> Result<usize> {
        let n = usize::try_from(n).map_err(|_| Error::section(self.section, "length overflow"))?;
        if n.saturating_mul(width) > self.bytes.len() - self.pos {
            return Err(Error::section(self.section, "declared length exceeds payload"));
        }
        Ok(n)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::section(self.section, "trailing bytes"));
        }
        Ok(())
    }
}

/// Serializes a pipeline. Output is a pure function of the inputs.
pub fn encode(pipeline: &Pipeline, search: StoredSearch) -> Vec<u8> {
    let index = &pipeline.index;
    let base = index.base();
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();

    let mut head = Writer::default();
    head.u64(base.count() as u64);
    head.u32(base.dim() as u32);
    head.u32(index.max_degree() as u32);
    head.u32(index.default_entry());
    head.u32(search.k as u32);
    head.u32(search.pool_size as u32);
    sections.push((b"HEAD", head.0));

    let mut vecs = Writer::default();
    vecs.f32s(base.values());
    sections.push((b"VECS", vecs.0));

    if let Some(ids) = base.ids() {
        let mut w = Writer::default();
        w.u32s(ids);
        sections.push((b"IDS_", w.0));
    }

    let mut adj = Writer::default();
    for &o in index.offsets() {
        adj.u64(o as u64);
    }
    adj.u32s(index.flat_neighbors());
    adj.u32(index.repaired_nodes().len() as u32);
    adj.u32s(index.repaired_nodes());
    sections.push((b"ADJ_", adj.0));

    if let Some(p) = &pipeline.pca {
        let mut w = Writer::default();
        w.u32(p.source_dim() as u32);
        w.u32(p.target_dim() as u32);
        w.f64(p.total_variance());
        w.f32s(p.mean());
        w.f32s(p.basis());
        for &e in p.eigenvalues() {
            w.f64(e);
        }
        sections.push((b"PCA_", w.0));
    }

    if let Some(s) = &pipeline.selector {
        let mut w = Writer::default();
        w.u32(s.dim() as u32);
        w.u32(s.num_clusters() as u32);
        w.f32s(s.means());
        w.u32s(s.centroid_ids());
        sections.push((b"SEL_", w.0));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

fn section_name(tag: &[u8]) -> Option<&'static str> {
    Some(match tag {
        b"HEAD" => "HEAD",
        b"VECS" => "VECS",
        b"IDS_" => "IDS_",
        b"ADJ_" => "ADJ_",
        b"PCA_" => "PCA_",
        b"SEL_" => "SEL_",
        _ => return None,
    })
}

/// Parses and validates an encoded pipeline. Errors name the offending
/// section.
pub fn decode(bytes: &[u8]) -> Result<(Pipeline, StoredSearch)> {
    let mut r = Reader::new(bytes, "header");
    if r.take(8)? != MAGIC {
        return Err(Error::section("header", "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::section("header", format!("unsupported format version {version}")));
    }
    let n_sections = r.u32()?;
    let mut payloads: Vec<(&'static str, &[u8])> = Vec::new();
    for _ in 0..n_sections {
        let tag = r.take(4)?;
        let name = section_name(tag)
            .ok_or_else(|| Error::section("header", format!("unknown section tag {:?}", String::from_utf8_lossy(tag))))?;
        r.section = name;
        let len = r.u64()?;
        let crc = r.u32()?;
        let len = r.len(len, 1)?;
        let payload = r.take(len)?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::section(name, "checksum mismatch"));
        }
        if payloads.iter().any(|(n, _)| *n == name) {
            return Err(Error::section(name, "duplicate section"));
        }
        payloads.push((name, payload));
        r.section = "header";
    }
    r.finish()?;
    let get = |name: &'static str| payloads.iter().find(|(n, _)| *n == name).map(|(_, p)| *p);
    let require = |name: &'static str| get(name).ok_or_else(|| Error::section(name, "missing required section"));

    let mut h = Reader::new(require("HEAD")?, "HEAD");
    let count = usize::try_from(h.u64()?).map_err(|_| Error::section("HEAD", "count overflow"))?;
    let dim = h.u32()? as usize;
    let max_degree = h.u32()? as usize;
    let default_entry = h.u32()?;
    let search = StoredSearch {
        k: h.u32()? as usize,
        pool_size: h.u32()? as usize,
    };
    h.finish()?;

    let payload = require("VECS")?;
    let mut v = Reader::new(payload, "VECS");
    if count.checked_mul(dim).and_then(|x| x.checked_mul(4)) != Some(payload.len()) {
        return Err(Error::section("VECS", "size does not match HEAD count and dim"));
    }
    let values = v.f32s(count * dim)?;
    let mut base = VectorSet::new(dim, values).map_err(|e| Error::section("VECS", e.to_string()))?;
    if let Some(payload) = get("IDS_") {
        let mut r = Reader::new(payload, "IDS_");
        let n = r.len(count as u64, 4)?;
        let ids = r.u32s(n)?;
        r.finish()?;
        base = base.with_ids(ids).map_err(|e| Error::section("IDS_", e.to_string()))?;
    }

    let mut a = Reader::new(require("ADJ_")?, "ADJ_");
    let n_off = a.len(count as u64 + 1, 8)?;
    let offsets = (0..n_off)
        .map(|_| a.u64().map(|o| o as usize))
        .collect::<Result<Vec<_>>>()?;
    let edges = *offsets.last().unwrap_or(&0);
    let edges = a.len(edges as u64, 4)?;
    let neighbors = a.u32s(edges)?;
    let n_rep = a.u32()? as u64;
    let n_rep = a.len(n_rep, 4)?;
    let repaired = a.u32s(n_rep)?;
    a.finish()?;
    let index = GraphIndex::from_parts(base, offsets, neighbors, max_degree, default_entry, repaired)
        .map_err(|e| Error::section("ADJ_", e.to_string()))?;

    let pca = match get("PCA_") {
        None => None,
        Some(payload) => {
            let mut r = Reader::new(payload, "PCA_");
            let d0 = r.u32()? as usize;
            let d = r.u32()? as usize;
            let total = r.f64()?;
            let mean = r.f32s(r.len(d0 as u64, 4)?)?;
            let n_basis = r.len((d0 as u64) * (d as u64), 4)?;
            let basis = r.f32s(n_basis)?;
            let eig = r.f64s(r.len(d as u64, 8)?)?;
            r.finish()?;
            if d != dim {
                return Err(Error::section("PCA_", "target dimension does not match indexed vectors"));
            }
            Some(PcaModel::from_parts(d0, d, mean, basis, eig, total).map_err(|e| Error::section("PCA_", e.to_string()))?)
        }
    };

    let selector = match get("SEL_") {
        None => None,
        Some(payload) => {
            let mut r = Reader::new(payload, "SEL_");
            let sdim = r.u32()? as usize;
            let clusters = r.u32()? as usize;
            let n_means = r.len((sdim as u64) * (clusters as u64), 4)?;
            let means = r.f32s(n_means)?;
            let ids = r.u32s(r.len(clusters as u64, 4)?)?;
            r.finish()?;
            if sdim != dim || ids.iter().any(|&i| i as usize >= count) {
                return Err(Error::section("SEL_", "selector does not match index"));
            }
            Some(EntryPointSelector::from_parts(sdim, means, ids).map_err(|e| Error::section("SEL_", e.to_string()))?)
        }
    };

    Ok((
        Pipeline {
            pca,
            index,
            selector,
        },
        search,
    ))
}

pub fn save(pipeline: &Pipeline, search: StoredSearch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(pipeline, search);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Pipeline, StoredSearch)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::pipeline::PipelineParams;

    fn sample() -> Pipeline {
        let base = generate_synthetic(600, 8, 3, 0.8, 1).unwrap();
        let params = PipelineParams {
            d: Some(5),
            alpha: 0.9,
            num_clusters: 4,
            max_degree: 12,
            build_pool: 24,
            ..Default::default()
        };
        Pipeline::build(&base, &params, None).unwrap().0
    }

    const SEARCH: StoredSearch = StoredSearch { k: 10, pool_size: 40 };

    #[test]
    fn round_trip() {
        let p = sample();
        let bytes = encode(&p, SEARCH);
        let (back, s) = decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(s, SEARCH);
        assert_eq!(encode(&back, SEARCH), bytes);
    }

    #[test]
    fn corrupt_section_is_named() {
        let p = sample();
        let bytes = encode(&p, SEARCH);
        // flip a byte inside the VECS payload: 16-byte file header, HEAD
        // section (16-byte section header + 28-byte payload), VECS header
        let mut bad = bytes.clone();
        bad[16 + 16 + 28 + 16 + 5] ^= 0xFF;
        match decode(&bad) {
            Err(Error::Section { section, .. }) => assert_eq!(section, "VECS"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode(&sample(), SEARCH);
        bytes[8] = 99;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(decode(b"nonsense").is_err());
        let truncated = &encode(&sample(), SEARCH)[..100];
        assert!(decode(truncated).is_err());
    }
}
