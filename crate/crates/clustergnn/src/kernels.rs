//! Fused attention kernels shared by the autodiff graph, the inference path,
//! the dense-masked oracle, and the benchmark harness.
//!
//! Score/probability buffers are registered with [`bufstats`] so the bench
//! harness can report attention memory without OS-level noise.

use crate::error::{Error, Result};
use crate::matrix::{dot64, softmax_row_into, Mask, Matrix, Scalar};

/// Instrumented accounting of attention score/value buffers.
///
/// Measurements run inside a [`Session`], which serializes concurrent users
/// and attributes only buffers allocated on the owning thread (kernels always
/// allocate score buffers on their caller's thread).
pub mod bufstats {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Mutex, MutexGuard};
    use std::thread::ThreadId;

    static LOCK: Mutex<()> = Mutex::new(());
    static OWNER: Mutex<Option<ThreadId>> = Mutex::new(None);
    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub struct Session {
        _guard: MutexGuard<'static, ()>,
    }

    /// Starts a measurement scope; blocks until exclusive.
    pub fn session() -> Session {
        let guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        *OWNER.lock().unwrap_or_else(|e| e.into_inner()) = Some(std::thread::current().id());
        CURRENT.store(0, Ordering::SeqCst);
        PEAK.store(0, Ordering::SeqCst);
        Session { _guard: guard }
    }

    impl Session {
        pub fn peak_bytes(&self) -> usize {
            PEAK.load(Ordering::SeqCst)
        }

        pub fn reset(&self) {
            CURRENT.store(0, Ordering::SeqCst);
            PEAK.store(0, Ordering::SeqCst);
        }
    }

    impl Drop for Session {
        fn drop(&mut self) {
            *OWNER.lock().unwrap_or_else(|e| e.into_inner()) = None;
        }
    }

    fn owned() -> bool {
        OWNER
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .map_or(false, |id| id == std::thread::current().id())
    }

    pub(crate) fn track(bytes: usize) -> bool {
        if !owned() {
            return false;
        }
        let cur = CURRENT.fetch_add(bytes, Ordering::SeqCst) + bytes;
        PEAK.fetch_max(cur, Ordering::SeqCst);
        true
    }

    pub(crate) fn untrack(bytes: usize) {
        CURRENT.fetch_sub(bytes, Ordering::SeqCst);
    }
}

/// Score buffer registered with [`bufstats`] for its lifetime.
struct TrackedBuf<S> {
    data: Vec<S>,
    bytes: usize,
}

impl<S: Scalar> TrackedBuf<S> {
    fn zeros(len: usize) -> Self {
        let bytes = len * std::mem::size_of::<S>();
        let tracked = bufstats::track(bytes);
        TrackedBuf {
            data: vec![S::zero(); len],
            bytes: if tracked { bytes } else { 0 },
        }
    }
}

impl<S> Drop for TrackedBuf<S> {
    fn drop(&mut self) {
        if self.bytes > 0 {
            bufstats::untrack(self.bytes);
        }
    }
}

pub struct AttentionOutput<S> {
    /// Attention messages, `n_q × d_v`.
    pub out: Matrix<S>,
    /// Post-softmax probabilities, kept only when requested (training).
    pub probs: Option<Matrix<S>>,
}

/// Scaled dot-product attention with optional pre-softmax masking.
///
/// Masked score entries are replaced by the −1e9 sentinel before the
/// stabilized softmax, so their probabilities underflow to exactly zero.
/// Queries are processed in `chunks` row chunks; results are independent of
/// the chunk count, only the score-buffer footprint changes.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    mask: Option<&Mask>,
    chunks: usize,
    keep_probs: bool,
    threads: usize,
) -> Result<AttentionOutput<S>> {
    let (n_q, dh) = q.shape();
    let n_k = k.rows();
    assert_eq!(k.cols(), dh, "attention: query/key dim mismatch");
    assert_eq!(v.rows(), n_k, "attention: key/value count mismatch");
    if n_k == 0 {
        return Err(Error::Empty("attention source"));
    }
    if let Some(m) = mask {
        assert_eq!((m.rows(), m.cols()), (n_q, n_k), "attention mask shape");
    }
    let chunks = chunks.max(1).min(n_q.max(1));
    let chunk_rows = n_q.div_ceil(chunks);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut out = Matrix::zeros(n_q, v.cols());
    let mut probs = keep_probs.then(|| Matrix::zeros(n_q, n_k));
    let mut scores = TrackedBuf::<S>::zeros(chunk_rows * n_k);

    let mut start = 0;
    while start < n_q {
        let rows_here = chunk_rows.min(n_q - start);
        let score_chunk = &mut scores.data[..rows_here * n_k];
        let out_chunk = {
            let base = start * v.cols();
            &mut out.data_mut()[base..base + rows_here * v.cols()]
        };
        run_rows(
            q, k, v, mask, scale, start, rows_here, score_chunk, out_chunk, threads,
        )?;
        if let Some(p) = probs.as_mut() {
            let base = start * n_k;
            p.data_mut()[base..base + rows_here * n_k].copy_from_slice(score_chunk);
        }
        start += rows_here;
    }
    Ok(AttentionOutput { out, probs })
}

/// Fills `scores` with post-softmax probabilities and `out` with messages for
/// query rows `[q_start, q_start + rows)`.
fn run_rows<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    mask: Option<&Mask>,
    scale: f64,
    q_start: usize,
    rows: usize,
    scores: &mut [S],
    out: &mut [S],
    threads: usize,
) -> Result<()> {
    let n_k = k.rows();
    let dv = v.cols();
    // Row-partitioned parallelism: values are identical for any thread count.
    let threads = effective_threads(threads, rows, n_k);
    if threads <= 1 {
        return rows_serial(q, k, v, mask, scale, q_start, 0, rows, scores, out);
    }
    let per = rows.div_ceil(threads);
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let mut score_rest = scores;
        let mut out_rest = out;
        let mut offset = 0;
        while offset < rows {
            let take = per.min(rows - offset);
            let (score_part, srest) = score_rest.split_at_mut(take * n_k);
            let (out_part, orest) = out_rest.split_at_mut(take * dv);
            score_rest = srest;
            out_rest = orest;
            let local = offset;
            handles.push(scope.spawn(move || {
                rows_serial(q, k, v, mask, scale, q_start, local, take, score_part, out_part)
            }));
            offset += take;
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(())
}

fn rows_serial<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    mask: Option<&Mask>,
    scale: f64,
    q_start: usize,
    local_start: usize,
    rows: usize,
    scores: &mut [S],
    out: &mut [S],
) -> Result<()> {
    let n_k = k.rows();
    let dv = v.cols();
    let mut srow64 = vec![0f64; n_k];
    let mut acc = vec![0f64; dv];
    for r in 0..rows {
        let i = q_start + local_start + r;
        let qrow = q.row(i);
        let srow = &mut scores[r * n_k..(r + 1) * n_k];
        for (j, s) in srow.iter_mut().enumerate() {
            *s = S::from64(dot64(qrow, k.row(j)) * scale);
        }
        let mrow = mask.map(|m| m.row(i));
        softmax_row_into(srow, mrow, &mut srow64).ok_or(Error::FullyMaskedRow { row: i })?;
        for (s, &p) in srow.iter_mut().zip(srow64.iter()) {
            *s = S::from64(p);
        }
        for a in acc.iter_mut() {
            *a = 0.0;
        }
        for (j, &p) in srow.iter().enumerate() {
            let pv = p.into64();
            if pv == 0.0 {
                continue;
            }
            for (a, &val) in acc.iter_mut().zip(v.row(j)) {
                *a += pv * val.into64();
            }
        }
        let orow = &mut out[r * dv..(r + 1) * dv];
        for (o, &a) in orow.iter_mut().zip(acc.iter()) {
            *o = S::from64(a);
        }
    }
    Ok(())
}

fn effective_threads(threads: usize, rows: usize, n_k: usize) -> usize {
    if threads <= 1 || rows * n_k < 1 << 16 {
        1
    } else {
        threads.min(rows)
    }
}

/// Block-diagonal attention over pre-permuted inputs.
///
/// `blocks` are disjoint row ranges covering `0..n`; queries in a block attend
/// exactly to the keys of the same block. Blocks run in index order.
pub fn block_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    blocks: &[(usize, usize)],
    keep_probs: bool,
    threads: usize,
) -> Result<(Matrix<S>, Option<Vec<Matrix<S>>>)> {
    assert_eq!(q.rows(), k.rows(), "block attention: shared assignment");
    assert_eq!(q.rows(), v.rows(), "block attention: shared assignment");
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut probs = keep_probs.then(Vec::new);
    for &(start, len) in blocks {
        if len == 0 {
            continue;
        }
        let qb = q.slice_rows(start, len);
        let kb = k.slice_rows(start, len);
        let vb = v.slice_rows(start, len);
        let res = scaled_dot_attention(&qb, &kb, &vb, None, 1, keep_probs, threads)?;
        for r in 0..len {
            out.row_mut(start + r).copy_from_slice(res.out.row(r));
        }
        if let Some(ps) = probs.as_mut() {
            ps.push(res.probs.expect("probs requested"));
        }
    }
    Ok((out, probs))
}
