//! Binary file formats (keypoints, checksummed weights), the match TSV, and
//! the bench CSV. All multi-byte values are little-endian.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cluster::ClusterState;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::matcher::MatchResult;
use crate::matrix::Matrix;
use crate::model::Model;

pub const KEYPOINT_MAGIC: &[u8; 4] = b"CGKP";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"CGWT";
pub const KEYPOINT_VERSION: u16 = 1;
pub const WEIGHTS_VERSION: u16 = 1;

/// Keypoint file payload: the set plus the image frame it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFile {
    pub image_w: u32,
    pub image_h: u32,
    pub keypoints: KeypointSet,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], path: &Path) -> Self {
        Reader { data, pos: 0, path: path.display().to_string() }
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { path: self.path.clone(), offset: self.pos as u64, msg: msg.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return self.fail(format!(
                "unexpected end of file while reading {what} ({n} bytes needed, {} left)",
                self.data.len() - self.pos
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn write_keypoints(path: &Path, file: &KeypointFile) -> Result<()> {
    let kp = &file.keypoints;
    kp.validate((file.image_w, file.image_h))?;
    let n = kp.len();
    let d = kp.descriptor_dim();
    if d > u16::MAX as usize || n > u32::MAX as usize {
        return Err(Error::config("keypoint file limits exceeded"));
    }
    let mut buf = Vec::with_capacity(20 + n * (12 + 4 * d));
    buf.extend_from_slice(KEYPOINT_MAGIC);
    buf.extend_from_slice(&KEYPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u16).to_le_bytes());
    buf.extend_from_slice(&file.image_w.to_le_bytes());
    buf.extend_from_slice(&file.image_h.to_le_bytes());
    for i in 0..n {
        buf.extend_from_slice(&kp.coords[i][0].to_le_bytes());
        buf.extend_from_slice(&kp.coords[i][1].to_le_bytes());
        buf.extend_from_slice(&kp.scores[i].to_le_bytes());
        for &x in kp.descriptors.row(i) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<KeypointFile> {
    let data = std::fs::read(path)?;
    let mut r = Reader::new(&data, path);
    let magic = r.take(4, "magic")?;
    if magic != KEYPOINT_MAGIC {
        let mut r2 = Reader::new(&data, path);
        r2.pos = 0;
        return r2.fail(format!("bad magic {magic:?}, expected \"CGKP\""));
    }
    let version = r.u16("version")?;
    if version != KEYPOINT_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let n = r.u32("keypoint count")? as usize;
    let d = r.u16("descriptor dim")? as usize;
    let image_w = r.u32("image width")?;
    let image_h = r.u32("image height")?;
    if n == 0 {
        return r.fail("keypoint file contains no keypoints");
    }
    let mut coords = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut desc = Vec::with_capacity(n * d);
    for i in 0..n {
        let x = r.f32(&format!("keypoint {i} x"))?;
        let y = r.f32(&format!("keypoint {i} y"))?;
        let s = r.f32(&format!("keypoint {i} score"))?;
        coords.push([x, y]);
        scores.push(s);
        desc.extend(r.f32_vec(d, &format!("keypoint {i} descriptor"))?);
    }
    if !r.done() {
        return r.fail(format!("{} trailing bytes", data.len() - r.pos));
    }
    let keypoints = KeypointSet { coords, scores, descriptors: Matrix::from_vec(n, d, desc) };
    keypoints.validate((image_w, image_h)).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 16,
        msg: e.to_string(),
    })?;
    Ok(KeypointFile { image_w, image_h, keypoints })
}

fn push_blob(buf: &mut Vec<u8>, name: &str, m: &Matrix<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes config header, every named parameter blob, cluster centers, and
/// a trailing SHA-256 over the whole preceding byte stream.
pub fn write_weights(path: &Path, model: &Model<f32>) -> Result<()> {
    let cfg = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.d as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.heads as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.init_depth as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.layers_per_stage as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.chunk_queries as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.kmeans_iters as u16).to_le_bytes());
    buf.extend_from_slice(&cfg.beta.to_le_bytes());
    buf.extend_from_slice(&cfg.gamma.to_le_bytes());
    buf.extend_from_slice(&(cfg.stage_schedule.len() as u16).to_le_bytes());
    for &k in &cfg.stage_schedule {
        buf.extend_from_slice(&(k as u32).to_le_bytes());
    }
    buf.push(model.centers_initialized as u8);

    let mut blobs: Vec<(String, Matrix<f32>)> = Vec::new();
    model.weights.visit(&mut |name, m| blobs.push((name, m.clone())));
    for (s, stage) in model.clusters.iter().enumerate() {
        for (h, c) in stage.iter().enumerate() {
            blobs.push((format!("clusters.stage{s}.head{h}.centers"), c.centers.clone()));
        }
    }
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, m) in &blobs {
        push_blob(&mut buf, name, m);
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Model<f32>> {
    let data = std::fs::read(path)?;
    if data.len() < 38 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: data.len() as u64,
            msg: "file too short for a weights header".into(),
        });
    }
    let (body, checksum) = data.split_at(data.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: (data.len() - 32) as u64,
            msg: "checksum mismatch: file is corrupt".into(),
        });
    }

    let mut r = Reader::new(body, path);
    let magic = r.take(4, "magic")?;
    if magic != WEIGHTS_MAGIC {
        let mut r2 = Reader::new(body, path);
        r2.pos = 0;
        return r2.fail(format!("bad magic {magic:?}, expected \"CGWT\""));
    }
    let version = r.u16("version")?;
    if version != WEIGHTS_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let d = r.u16("d")? as usize;
    let heads = r.u16("heads")? as usize;
    let init_depth = r.u16("init_depth")? as usize;
    let layers_per_stage = r.u16("layers_per_stage")? as usize;
    let chunk_queries = r.u16("chunk_queries")? as usize;
    let kmeans_iters = r.u16("kmeans_iters")? as usize;
    let beta = r.f64("beta")?;
    let gamma = r.f64("gamma")?;
    let n_stages = r.u16("stage count")? as usize;
    let mut stage_schedule = Vec::with_capacity(n_stages);
    for i in 0..n_stages {
        stage_schedule.push(r.u32(&format!("stage {i} cluster count"))? as usize);
    }
    let centers_initialized = r.u8("centers_initialized flag")? != 0;
    let config = ModelConfig {
        d,
        heads,
        init_depth,
        stage_schedule,
        layers_per_stage,
        chunk_queries,
        beta,
        kmeans_iters,
        gamma,
    };
    config.validate().map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 6,
        msg: format!("invalid config block: {e}"),
    })?;

    let blob_count = r.u32("blob count")? as usize;
    let mut blobs: std::collections::BTreeMap<String, Matrix<f32>> = Default::default();
    for b in 0..blob_count {
        let name_len = r.u16(&format!("blob {b} name length"))? as usize;
        let name_bytes = r.take(name_len, &format!("blob {b} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format {
                path: path.display().to_string(),
                offset: r.pos as u64,
                msg: format!("blob {b} name is not utf-8"),
            })?
            .to_string();
        let rows = r.u32(&format!("blob `{name}` rows"))? as usize;
        let cols = r.u32(&format!("blob `{name}` cols"))? as usize;
        let values = r.f32_vec(rows * cols, &format!("blob `{name}` data"))?;
        blobs.insert(name, Matrix::from_vec(rows, cols, values));
    }
    if !r.done() {
        return r.fail(format!("{} trailing bytes before checksum", body.len() - r.pos));
    }

    // Rebuild a skeleton and fill it blob by blob; shapes must agree.
    let mut model = Model::<f32>::new(config, 0).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 6,
        msg: e.to_string(),
    })?;
    let mut missing = Vec::new();
    let fill = |name: String, m: &mut Matrix<f32>,
                blobs: &std::collections::BTreeMap<String, Matrix<f32>>,
                missing: &mut Vec<String>| {
        match blobs.get(&name) {
            Some(src) if src.shape() == m.shape() => *m = src.clone(),
            Some(src) => missing.push(format!(
                "`{name}` has shape {:?}, expected {:?}",
                src.shape(),
                m.shape()
            )),
            None => missing.push(format!("`{name}` missing")),
        }
    };
    model.weights.visit_mut(&mut |name, m| fill(name, m, &blobs, &mut missing));
    let beta = model.config.beta;
    for (s, stage) in model.clusters.iter_mut().enumerate() {
        for (h, c) in stage.iter_mut().enumerate() {
            let name = format!("clusters.stage{s}.head{h}.centers");
            let mut centers = c.centers.clone();
            fill(name, &mut centers, &blobs, &mut missing);
            *c = ClusterState { centers, stage_index: s, beta };
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("parameter blobs inconsistent with config: {}", missing.join("; ")),
        });
    }
    model.centers_initialized = centers_initialized;
    Ok(model)
}

/// Match TSV: `i<TAB>j<TAB>score` lines plus comment-prefixed summary lines.
pub fn write_matches(path: &Path, result: &MatchResult) -> Result<()> {
    let mut out = String::new();
    let mean: f64 = if result.pairs.is_empty() {
        0.0
    } else {
        result.pairs.iter().map(|&(_, _, s)| s as f64).sum::<f64>() / result.pairs.len() as f64
    };
    out.push_str(&format!("# matches: {}\n", result.pairs.len()));
    out.push_str(&format!("# mean_score: {mean:.6}\n"));
    out.push_str(&format!(
        "# unmatched_a: {} unmatched_b: {}\n",
        result.unmatched_a.len(),
        result.unmatched_b.len()
    ));
    for &(i, j, s) in &result.pairs {
        out.push_str(&format!("{i}\t{j}\t{s:.6}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Bench CSV rows, written with the pinned header.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub mode: String,
    pub ms: f64,
    pub bytes: usize,
    pub unmasked_pairs: u64,
    pub dense_pairs: u64,
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "n,mode,ms,bytes,unmasked_pairs,dense_pairs")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.3},{},{},{}",
            r.n, r.mode, r.ms, r.bytes, r.unmasked_pairs, r.dense_pairs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn temp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    fn sample_kp(seed: u64, n: usize, d: usize) -> KeypointFile {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        KeypointFile {
            image_w: 640,
            image_h: 480,
            keypoints: KeypointSet {
                coords: (0..n)
                    .map(|_| [r.gen_range(0.0..640.0), r.gen_range(0.0..480.0)])
                    .collect(),
                scores: (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
                descriptors: Matrix::from_fn(n, d, |_, _| r.gen_range(-1.0f32..1.0)),
            },
        }
    }

    #[test]
    fn keypoint_roundtrip_bit_identical() {
        let (_d, path) = temp("kp.cgkp");
        let file = sample_kp(1, 17, 8);
        write_keypoints(&path, &file).unwrap();
        let back = read_keypoints(&path).unwrap();
        assert_eq!(file, back);
    }

    #[test]
    fn keypoint_bad_magic_reports_offset_zero() {
        let (_d, path) = temp("kp.cgkp");
        write_keypoints(&path, &sample_kp(2, 4, 4)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match read_keypoints(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn keypoint_truncation_reports_offset() {
        let (_d, path) = temp("kp.cgkp");
        write_keypoints(&path, &sample_kp(3, 4, 4)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_keypoints(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert!(offset > 0);
                assert!(msg.contains("end of file"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_keypoint_file_rejected() {
        let (_d, path) = temp("kp.cgkp");
        let mut buf = Vec::new();
        buf.extend_from_slice(KEYPOINT_MAGIC);
        buf.extend_from_slice(&KEYPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&4u16.to_le_bytes());
        buf.extend_from_slice(&640u32.to_le_bytes());
        buf.extend_from_slice(&480u32.to_le_bytes());
        std::fs::write(&path, buf).unwrap();
        assert!(matches!(read_keypoints(&path), Err(Error::Format { .. })));
    }

    fn small_model(seed: u64) -> Model<f32> {
        let cfg = crate::config::ModelConfig {
            d: 8,
            heads: 2,
            init_depth: 1,
            stage_schedule: vec![2, 3],
            layers_per_stage: 1,
            ..crate::config::ModelConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn weights_roundtrip_bit_identical() {
        let (_d, path) = temp("w.cgwt");
        let mut model = small_model(5);
        model.centers_initialized = true;
        write_weights(&path, &model).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(model.config, back.config);
        assert_eq!(model.weights, back.weights);
        assert_eq!(model.centers_initialized, back.centers_initialized);
        for (a, b) in model.clusters.iter().flatten().zip(back.clusters.iter().flatten()) {
            assert_eq!(a.centers, b.centers);
            assert_eq!(a.stage_index, b.stage_index);
        }
    }

    #[test]
    fn weights_checksum_detects_corruption() {
        let (_d, path) = temp("w.cgwt");
        write_weights(&path, &small_model(6)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        match read_weights(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn match_tsv_layout() {
        let (_d, path) = temp("m.tsv");
        let result = MatchResult {
            pairs: vec![(0, 2, 0.9), (3, 1, 0.5)],
            unmatched_a: vec![1, 2],
            unmatched_b: vec![0],
        };
        write_matches(&path, &result).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# matches: 2\n"));
        assert!(text.contains("# mean_score: 0.700000"));
        assert!(text.contains("0\t2\t0.900000\n"));
        assert!(text.contains("3\t1\t0.500000\n"));
    }

    proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(16))]
        #[test]
        fn keypoint_roundtrip_property(seed in 0u64..1000, n in 1usize..40, d in 1usize..24) {
            let (_dir, path) = temp("p.cgkp");
            let file = sample_kp(seed, n, d);
            write_keypoints(&path, &file).unwrap();
            let back = read_keypoints(&path).unwrap();
            prop_assert_eq!(file, back);
        }
    }
}
