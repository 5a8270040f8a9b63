//! Retrieval evaluation: distances, cross-camera CMC and mAP, and the STAE embeddings file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{read_exact_at, read_u32_at};
use crate::error::{Result, StaError};
use crate::par::{self, Exec};

/// Ranks reported by [`MetricsReport`].
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Row-major `rows×cols` matrix; unlike [`crate::numerics::Tensor`] it may have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(StaError::dim("matrix data length", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Stacks equal-width rows; `cols` is used when `rows` is empty.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(StaError::dim(format!("row {i} width"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub identity: u32,
    pub camera: u32,
    pub distractor: bool,
}

impl ItemMeta {
    pub fn new(identity: u32, camera: u32) -> Self {
        Self {
            identity,
            camera,
            distractor: false,
        }
    }

    pub fn distractor(identity: u32, camera: u32) -> Self {
        Self {
            identity,
            camera,
            distractor: true,
        }
    }
}

/// Query and gallery embeddings (`Q×E`, `G×E`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub query: Matrix,
    pub query_meta: Vec<ItemMeta>,
    pub gallery: Matrix,
    pub gallery_meta: Vec<ItemMeta>,
}

impl RetrievalSet {
    pub fn new(query: Matrix, query_meta: Vec<ItemMeta>, gallery: Matrix, gallery_meta: Vec<ItemMeta>) -> Result<Self> {
        if query.cols() != gallery.cols() {
            return Err(StaError::dim("embedding width", query.cols(), gallery.cols()));
        }
        if query_meta.len() != query.rows() {
            return Err(StaError::dim("query labels", query.rows(), query_meta.len()));
        }
        if gallery_meta.len() != gallery.rows() {
            return Err(StaError::dim("gallery labels", gallery.rows(), gallery_meta.len()));
        }
        Ok(Self {
            query,
            query_meta,
            gallery,
            gallery_meta,
        })
    }

    /// Copy with every embedding scaled to unit length (zero rows stay zero).
    pub fn normalized(&self) -> Self {
        Self {
            query: normalize_rows(&self.query),
            gallery: normalize_rows(&self.gallery),
            ..self.clone()
        }
    }
}

pub fn normalize_rows(t: &Matrix) -> Matrix {
    let mut out = t.clone();
    if t.cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(t.cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Euclidean distance matrix `|Q|×|G|`.
pub fn pairwise_distances(q: &Matrix, g: &Matrix) -> Result<Matrix> {
    if q.cols() != g.cols() {
        return Err(StaError::dim("embedding width", q.cols(), g.cols()));
    }
    let mut data = Vec::with_capacity(q.rows() * g.rows());
    for i in 0..q.rows() {
        for j in 0..g.rows() {
            let d2: f64 = q.row(i).iter().zip(g.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            data.push(d2.sqrt());
        }
    }
    Matrix::new(q.rows(), g.rows(), data)
}

/// Ranked gallery for one query after filtering, marking which entries match.
///
/// Returns `None` when no valid match remains.
fn ranked_matches(dist: &[f64], query: &ItemMeta, gallery: &[ItemMeta]) -> Option<Vec<bool>> {
    let mut kept: Vec<usize> = (0..gallery.len())
        .filter(|&j| {
            let g = &gallery[j];
            !g.distractor && !(g.identity == query.identity && g.camera == query.camera)
        })
        .collect();
    kept.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let hits: Vec<bool> = kept.iter().map(|&j| gallery[j].identity == query.identity).collect();
    hits.contains(&true).then_some(hits)
}

fn check_consistent(dist: &Matrix, set: &RetrievalSet) -> Result<()> {
    if dist.rows() != set.query_meta.len() {
        return Err(StaError::dim("distance rows", set.query_meta.len(), dist.rows()));
    }
    if dist.cols() != set.gallery_meta.len() {
        return Err(StaError::dim("distance columns", set.gallery_meta.len(), dist.cols()));
    }
    Ok(())
}

/// Rank accuracies for each requested rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcResult {
    pub ranks: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn cmc(dist: &Matrix, set: &RetrievalSet, ranks: &[usize]) -> Result<CmcResult> {
    cmc_with(Exec::default(), dist, set, ranks)
}

pub fn cmc_with(exec: Exec, dist: &Matrix, set: &RetrievalSet, ranks: &[usize]) -> Result<CmcResult> {
    check_consistent(dist, set)?;
    let ng = set.gallery_meta.len();
    if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > ng) {
        return Err(StaError::arg(format!("rank {r} outside 1..={ng}")));
    }
    let queries: Vec<usize> = (0..set.query_meta.len()).collect();
    let first_hits = par::map(exec, &queries, |&i| {
        ranked_matches(dist.row(i), &set.query_meta[i], &set.gallery_meta)
            .map(|hits| hits.iter().position(|&h| h).expect("has a match"))
    });
    let evaluated = first_hits.iter().flatten().count();
    let accuracy = ranks
        .iter()
        .map(|&r| {
            let hits = first_hits.iter().flatten().filter(|&&pos| pos < r).count();
            if evaluated == 0 {
                0.0
            } else {
                hits as f64 / evaluated as f64
            }
        })
        .collect();
    Ok(CmcResult {
        ranks: ranks.to_vec(),
        accuracy,
        evaluated,
        skipped: queries.len() - evaluated,
    })
}

/// Average precision of one ranked hit list.
pub fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut total = 0.0;
    for (pos, _) in hits.iter().enumerate().filter(|(_, &h)| h) {
        found += 1;
        total += found as f64 / (pos + 1) as f64;
    }
    if found == 0 {
        0.0
    } else {
        total / found as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn mean_ap(dist: &Matrix, set: &RetrievalSet) -> Result<MapResult> {
    mean_ap_with(Exec::default(), dist, set)
}

pub fn mean_ap_with(exec: Exec, dist: &Matrix, set: &RetrievalSet) -> Result<MapResult> {
    check_consistent(dist, set)?;
    let queries: Vec<usize> = (0..set.query_meta.len()).collect();
    let aps = par::map(exec, &queries, |&i| {
        ranked_matches(dist.row(i), &set.query_meta[i], &set.gallery_meta)
            .map(|hits| average_precision(&hits))
    });
    let evaluated = aps.iter().flatten().count();
    let sum: f64 = aps.iter().flatten().sum();
    Ok(MapResult {
        map: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        skipped: queries.len() - evaluated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "rank1={}\nrank5={}\nrank10={}\nrank20={}\nmap={}\nevaluated={}\nskipped={}\n",
            self.rank1, self.rank5, self.rank10, self.rank20, self.map, self.evaluated, self.skipped
        )
    }

    pub fn csv_header() -> &'static str {
        "rank1,rank5,rank10,rank20,map,evaluated,skipped"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.rank1, self.rank5, self.rank10, self.rank20, self.map, self.evaluated, self.skipped
        )
    }
}

/// Full report. Ranks beyond the gallery size are read at the last gallery position.
pub fn evaluate(set: &RetrievalSet, normalize: bool, exec: Exec) -> Result<MetricsReport> {
    let normalized;
    let set = if normalize {
        normalized = set.normalized();
        &normalized
    } else {
        set
    };
    let dist = pairwise_distances(&set.query, &set.gallery)?;
    let ng = set.gallery_meta.len();
    if ng == 0 {
        return Ok(MetricsReport {
            rank1: 0.0,
            rank5: 0.0,
            rank10: 0.0,
            rank20: 0.0,
            map: 0.0,
            evaluated: 0,
            skipped: set.query_meta.len(),
        });
    }
    let ranks: Vec<usize> = REPORT_RANKS.iter().map(|&r| r.min(ng)).collect();
    let c = cmc_with(exec, &dist, set, &ranks)?;
    let m = mean_ap_with(exec, &dist, set)?;
    Ok(MetricsReport {
        rank1: c.accuracy[0],
        rank5: c.accuracy[1],
        rank10: c.accuracy[2],
        rank20: c.accuracy[3],
        map: m.map,
        evaluated: c.evaluated,
        skipped: c.skipped,
    })
}

const STAE_MAGIC: &[u8; 4] = b"STAE";
const STAE_VERSION: u32 = 1;

/// Embeddings and labels as stored in a STAE file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    /// `count×E`, values exactly representable in f32.
    pub embeddings: Matrix,
    pub meta: Vec<ItemMeta>,
}

pub fn write_stae(file: &EmbeddingFile, mut w: impl Write) -> std::io::Result<()> {
    let (count, e) = (file.embeddings.rows(), file.embeddings.cols());
    w.write_all(STAE_MAGIC)?;
    w.write_all(&STAE_VERSION.to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    w.write_all(&(e as u32).to_le_bytes())?;
    for (i, m) in file.meta.iter().enumerate() {
        w.write_all(&m.identity.to_le_bytes())?;
        w.write_all(&m.camera.to_le_bytes())?;
        w.write_all(&[m.distractor as u8])?;
        for &v in file.embeddings.row(i) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_stae(mut r: impl Read) -> Result<EmbeddingFile> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != STAE_MAGIC {
        return Err(StaError::format(0, format!("bad magic {magic:?}, expected \"STAE\"")));
    }
    let version = read_u32_at(&mut r, &mut offset, "version")?;
    if version != STAE_VERSION {
        return Err(StaError::Version(format!("unsupported STAE version {version}")));
    }
    let count = read_u32_at(&mut r, &mut offset, "count")? as usize;
    let e = read_u32_at(&mut r, &mut offset, "embedding width")? as usize;
    let mut meta = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * e);
    let mut payload = vec![0u8; e * 4];
    for _ in 0..count {
        let identity = read_u32_at(&mut r, &mut offset, "identity")?;
        let camera = read_u32_at(&mut r, &mut offset, "camera")?;
        let mut flag = [0u8; 1];
        let flag_at = offset;
        read_exact_at(&mut r, &mut flag, &mut offset, "distractor flag")?;
        if flag[0] > 1 {
            return Err(StaError::format(flag_at, format!("distractor flag must be 0 or 1, got {}", flag[0])));
        }
        read_exact_at(&mut r, &mut payload, &mut offset, "embedding")?;
        data.extend(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
        );
        meta.push(ItemMeta {
            identity,
            camera,
            distractor: flag[0] == 1,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| StaError::format(offset, e.to_string()))? != 0 {
        return Err(StaError::format(offset, "trailing bytes after last embedding"));
    }
    Ok(EmbeddingFile {
        embeddings: Matrix::new(count, e, data)?,
        meta,
    })
}

pub fn save_embeddings(file: &EmbeddingFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| StaError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_stae(file, &mut w).and_then(|_| w.flush()).map_err(|e| StaError::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| StaError::io(path, e))?;
    read_stae(BufReader::new(f))
}
