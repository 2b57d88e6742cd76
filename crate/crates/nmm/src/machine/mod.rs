//! The simulated core: HBM tensors, a spilling SBUF allocator, PSUM
//! accumulation banks, DMA transfers (with optional transpose in transit),
//! and the tile-level tensor-engine instruction, all feeding exhaustive
//! counters.
//!
//! A `Machine` owns one simulation run. In data mode every transfer and
//! instruction moves real `f32` values so kernel outputs can be checked
//! against dense references; with data mode off only the (identical)
//! counters are produced, which keeps LLM-scale shapes fast.

mod config;
mod counters;

pub use config::MachineConfig;
pub use counters::TraceCounters;

use crate::bf16;
use crate::error::MachineError;
use crate::matrix::{Dtype, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HbmId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsumId(usize);

/// A tile view into an SBUF buffer: `rows` x `cols` starting at
/// (`row0`, `col0`).
#[derive(Debug, Clone, Copy)]
pub struct TileRef {
    pub buf: BufId,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

struct HbmTensor {
    rows: usize,
    cols: usize,
    dtype: Dtype,
    data: Option<Vec<f32>>,
}

struct SbufBuf {
    rows: usize,
    cols: usize,
    elem_bytes: usize,
    bytes: u64,
    /// Kept across evictions: the spilled copy conceptually lives in HBM
    /// and is restored on reload.
    data: Option<Vec<f32>>,
    resident: bool,
    pinned: bool,
    last_touch: u64,
    freed: bool,
}

struct BankTile {
    rows: usize,
    cols: usize,
    data: Option<Vec<f32>>,
}

struct PsumBlock {
    rows: usize,
    cols: usize,
    grid_rows: usize,
    grid_cols: usize,
    banks: Vec<usize>,
}

pub struct Machine {
    cfg: MachineConfig,
    data_mode: bool,
    hbm: Vec<HbmTensor>,
    bufs: Vec<SbufBuf>,
    resident_bytes: u64,
    peak_resident_bytes: u64,
    clock: u64,
    banks: Vec<Option<BankTile>>,
    blocks: Vec<Option<PsumBlock>>,
    ctr: TraceCounters,
    phase_flops: u64,
    phase_dma_plain_bytes: u64,
    phase_dma_transposed_bytes: u64,
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Result<Self, MachineError> {
        cfg.validate()?;
        let banks = (0..cfg.psum_banks).map(|_| None).collect();
        Ok(Machine {
            cfg,
            data_mode: true,
            hbm: Vec::new(),
            bufs: Vec::new(),
            resident_bytes: 0,
            peak_resident_bytes: 0,
            clock: 0,
            banks,
            blocks: Vec::new(),
            ctr: TraceCounters::default(),
            phase_flops: 0,
            phase_dma_plain_bytes: 0,
            phase_dma_transposed_bytes: 0,
        })
    }

    /// Disable value movement: counters stay exact, outputs become
    /// unavailable.
    pub fn with_data_mode(mut self, on: bool) -> Self {
        self.data_mode = on;
        self
    }

    pub fn data_mode(&self) -> bool {
        self.data_mode
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &TraceCounters {
        &self.ctr
    }

    /// High-water mark of resident SBUF bytes.
    pub fn peak_sbuf_observed(&self) -> u64 {
        self.peak_resident_bytes
    }

    pub fn live_accumulation_banks(&self) -> usize {
        self.banks.iter().filter(|b| b.is_some()).count()
    }

    /// Close the current roofline phase: the phase contributes
    /// `max(compute, dma)` to total time under the overlap assumption.
    pub fn end_phase(&mut self) {
        if self.phase_flops == 0
            && self.phase_dma_plain_bytes == 0
            && self.phase_dma_transposed_bytes == 0
        {
            return;
        }
        let compute = self.phase_flops as f64 / self.cfg.peak_flops;
        let dma = self.phase_dma_plain_bytes as f64 / self.cfg.hbm_bandwidth
            + self.phase_dma_transposed_bytes as f64
                / (self.cfg.hbm_bandwidth * self.cfg.dma_transpose_bw_factor);
        self.ctr.modeled_compute_seconds += compute;
        self.ctr.modeled_dma_seconds += dma;
        self.ctr.modeled_total_seconds += compute.max(dma);
        self.phase_flops = 0;
        self.phase_dma_plain_bytes = 0;
        self.phase_dma_transposed_bytes = 0;
    }

    /// Record an explicit on-chip transpose of an intermediate tensor.
    pub fn note_intermediate_transpose(&mut self) {
        self.ctr.intermediate_transpose_count += 1;
    }

    // ---- HBM ----

    /// Stage a matrix in HBM. Staging models data already present before
    /// the kernel launches; it is not charged to any counter.
    pub fn hbm_upload(&mut self, m: &Matrix) -> HbmId {
        self.hbm.push(HbmTensor {
            rows: m.rows(),
            cols: m.cols(),
            dtype: m.dtype(),
            data: self.data_mode.then(|| m.data().to_vec()),
        });
        HbmId(self.hbm.len() - 1)
    }

    pub fn hbm_alloc(&mut self, rows: usize, cols: usize, dtype: Dtype) -> HbmId {
        self.hbm.push(HbmTensor {
            rows,
            cols,
            dtype,
            data: self.data_mode.then(|| vec![0.0; rows * cols]),
        });
        HbmId(self.hbm.len() - 1)
    }

    pub fn hbm_dims(&self, id: HbmId) -> (usize, usize, Dtype) {
        let t = &self.hbm[id.0];
        (t.rows, t.cols, t.dtype)
    }

    pub fn hbm_download(&self, id: HbmId) -> Option<Matrix> {
        let t = &self.hbm[id.0];
        t.data.as_ref().map(|d| {
            Matrix::from_vec(t.rows, t.cols, d.clone())
                .expect("hbm tensor consistent")
                .with_dtype(t.dtype)
                .expect("hbm values on dtype grid")
        })
    }

    // ---- SBUF ----

    pub fn sbuf_alloc(
        &mut self,
        rows: usize,
        cols: usize,
        elem_bytes: usize,
        pinned: bool,
    ) -> Result<BufId, MachineError> {
        let bytes = (rows * cols * elem_bytes) as u64;
        if bytes > self.cfg.sbuf_bytes {
            return Err(MachineError::AllocTooLarge {
                bytes,
                sbuf_bytes: self.cfg.sbuf_bytes,
            });
        }
        let id = self.bufs.len();
        self.bufs.push(SbufBuf {
            rows,
            cols,
            elem_bytes,
            bytes,
            data: self.data_mode.then(|| vec![0.0; rows * cols]),
            resident: false,
            pinned,
            last_touch: 0,
            freed: false,
        });
        self.make_room(bytes, id)?;
        let buf = &mut self.bufs[id];
        buf.resident = true;
        self.clock += 1;
        self.bufs[id].last_touch = self.clock;
        self.resident_bytes += bytes;
        self.peak_resident_bytes = self.peak_resident_bytes.max(self.resident_bytes);
        Ok(BufId(id))
    }

    pub fn sbuf_free(&mut self, id: BufId) -> Result<(), MachineError> {
        let buf = self.bufs.get_mut(id.0).ok_or(MachineError::BufferFreed(id.0))?;
        if buf.freed {
            return Err(MachineError::BufferFreed(id.0));
        }
        if buf.resident {
            self.resident_bytes -= buf.bytes;
        }
        buf.freed = true;
        buf.resident = false;
        buf.data = None;
        Ok(())
    }

    /// Mark a buffer as accessed: bumps its LRU recency, and if it was
    /// spilled, reloads it from HBM (charging spill_reload plus the DMA).
    pub fn touch(&mut self, id: BufId) -> Result<(), MachineError> {
        let buf = self.bufs.get(id.0).ok_or(MachineError::BufferFreed(id.0))?;
        if buf.freed {
            return Err(MachineError::BufferFreed(id.0));
        }
        let bytes = buf.bytes;
        if !buf.resident {
            self.ctr.spill_reload_bytes += bytes;
            self.ctr.hbm_read_bytes += bytes;
            self.ctr.sbuf_write_bytes += bytes;
            self.ctr.dma_transfer_count += 1;
            self.phase_dma_plain_bytes += bytes;
            self.make_room(bytes, id.0)?;
            self.bufs[id.0].resident = true;
            self.resident_bytes += bytes;
            self.peak_resident_bytes = self.peak_resident_bytes.max(self.resident_bytes);
        }
        self.clock += 1;
        self.bufs[id.0].last_touch = self.clock;
        Ok(())
    }

    fn make_room(&mut self, incoming: u64, exclude: usize) -> Result<(), MachineError> {
        while self.resident_bytes + incoming > self.cfg.sbuf_bytes {
            let victim = self
                .bufs
                .iter()
                .enumerate()
                .filter(|(i, b)| *i != exclude && b.resident && !b.pinned && !b.freed)
                .min_by_key(|(i, b)| (b.last_touch, *i))
                .map(|(i, _)| i);
            match victim {
                Some(i) => self.evict(i),
                None => {
                    return Err(MachineError::PinnedEviction {
                        needed: incoming,
                        resident: self.resident_bytes,
                    })
                }
            }
        }
        Ok(())
    }

    /// Whole-buffer eviction to HBM; the data stays stashed for reload.
    fn evict(&mut self, idx: usize) {
        let buf = &mut self.bufs[idx];
        buf.resident = false;
        let bytes = buf.bytes;
        self.resident_bytes -= bytes;
        self.ctr.spill_save_bytes += bytes;
        self.ctr.hbm_write_bytes += bytes;
        self.ctr.sbuf_read_bytes += bytes;
        self.ctr.dma_transfer_count += 1;
        self.phase_dma_plain_bytes += bytes;
    }

    pub fn buf_dims(&self, id: BufId) -> (usize, usize, usize) {
        let b = &self.bufs[id.0];
        (b.rows, b.cols, b.elem_bytes)
    }

    // ---- DMA ----

    /// Copy an HBM region into the top-left of an SBUF buffer, optionally
    /// transposed in transit by the DMA engine (no tensor-engine FLOPs, but
    /// reduced effective bandwidth). The rest of the buffer is zero-filled.
    pub fn dma_load(
        &mut self,
        src: HbmId,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
        transpose: bool,
        dst: BufId,
    ) -> Result<(), MachineError> {
        if rows == 0 || cols == 0 {
            return Ok(());
        }
        let tensor = &self.hbm[src.0];
        if row0 + rows > tensor.rows || col0 + cols > tensor.cols {
            return Err(MachineError::HbmOutOfBounds {
                row0,
                row1: row0 + rows,
                col0,
                col1: col0 + cols,
                rows: tensor.rows,
                cols: tensor.cols,
            });
        }
        let (need_r, need_c) = if transpose { (cols, rows) } else { (rows, cols) };
        let dbuf = &self.bufs[dst.0];
        if need_r > dbuf.rows || need_c > dbuf.cols {
            return Err(MachineError::DstTooSmall {
                needed_rows: need_r,
                needed_cols: need_c,
                rows: dbuf.rows,
                cols: dbuf.cols,
            });
        }
        if tensor.dtype.size_bytes() != dbuf.elem_bytes {
            return Err(MachineError::BlockShape(format!(
                "dma_load dtype width mismatch: tensor {} vs buffer {}",
                tensor.dtype.size_bytes(),
                dbuf.elem_bytes
            )));
        }
        let elem = dbuf.elem_bytes;
        self.touch(dst)?;
        let bytes = (rows * cols * elem) as u64;
        self.ctr.hbm_read_bytes += bytes;
        self.ctr.sbuf_write_bytes += bytes;
        self.ctr.dma_transfer_count += 1;
        if transpose {
            self.phase_dma_transposed_bytes += bytes;
        } else {
            self.phase_dma_plain_bytes += bytes;
        }
        if self.data_mode {
            let src_cols = self.hbm[src.0].cols;
            let src_data = self.hbm[src.0].data.as_ref().expect("data mode").clone();
            let dbuf = &mut self.bufs[dst.0];
            let dcols = dbuf.cols;
            let dd = dbuf.data.as_mut().expect("data mode");
            dd.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..rows {
                for j in 0..cols {
                    let v = src_data[(row0 + i) * src_cols + col0 + j];
                    if transpose {
                        dd[j * dcols + i] = v;
                    } else {
                        dd[i * dcols + j] = v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy the top-left region of an SBUF buffer into an HBM region.
    pub fn dma_store(
        &mut self,
        src: BufId,
        rows: usize,
        cols: usize,
        dst: HbmId,
        row0: usize,
        col0: usize,
    ) -> Result<(), MachineError> {
        if rows == 0 || cols == 0 {
            return Ok(());
        }
        let sbuf = &self.bufs[src.0];
        if rows > sbuf.rows || cols > sbuf.cols {
            return Err(MachineError::DstTooSmall {
                needed_rows: rows,
                needed_cols: cols,
                rows: sbuf.rows,
                cols: sbuf.cols,
            });
        }
        let tensor = &self.hbm[dst.0];
        if row0 + rows > tensor.rows || col0 + cols > tensor.cols {
            return Err(MachineError::HbmOutOfBounds {
                row0,
                row1: row0 + rows,
                col0,
                col1: col0 + cols,
                rows: tensor.rows,
                cols: tensor.cols,
            });
        }
        if tensor.dtype.size_bytes() != sbuf.elem_bytes {
            return Err(MachineError::BlockShape(
                "dma_store dtype width mismatch".into(),
            ));
        }
        self.touch(src)?;
        let bytes = (rows * cols * self.bufs[src.0].elem_bytes) as u64;
        self.ctr.hbm_write_bytes += bytes;
        self.ctr.sbuf_read_bytes += bytes;
        self.ctr.dma_transfer_count += 1;
        self.phase_dma_plain_bytes += bytes;
        if self.data_mode {
            let sbuf = &self.bufs[src.0];
            let scols = sbuf.cols;
            let sdata = sbuf.data.as_ref().expect("data mode").clone();
            let tensor = &mut self.hbm[dst.0];
            let tcols = tensor.cols;
            let td = tensor.data.as_mut().expect("data mode");
            for i in 0..rows {
                for j in 0..cols {
                    td[(row0 + i) * tcols + col0 + j] = sdata[i * scols + j];
                }
            }
        }
        Ok(())
    }

    // ---- PSUM ----

    /// Reserve the bank grid backing one accumulation block of
    /// `rows` x `cols` f32 accumulators. Each 128 x 512 tile of the block
    /// occupies one bank; running out of banks is an error, never silent.
    pub fn psum_alloc(&mut self, rows: usize, cols: usize) -> Result<PsumId, MachineError> {
        let tr = self.cfg.psum_tile_rows().min(self.cfg.partitions);
        let tc = self.cfg.psum_tile_cols();
        let grid_rows = rows.div_ceil(tr);
        let grid_cols = cols.div_ceil(tc);
        let needed = grid_rows * grid_cols;
        let free: Vec<usize> = self
            .banks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_none())
            .map(|(i, _)| i)
            .collect();
        if needed > free.len() {
            return Err(MachineError::PsumBanksExhausted {
                requested: needed,
                free: free.len(),
                banks: self.cfg.psum_banks,
            });
        }
        let mut bank_ids = Vec::with_capacity(needed);
        for idx in 0..needed {
            let (gi, gj) = (idx / grid_cols, idx % grid_cols);
            let trows = tr.min(rows - gi * tr);
            let tcols = tc.min(cols - gj * tc);
            let bank = free[idx];
            self.banks[bank] = Some(BankTile {
                rows: trows,
                cols: tcols,
                data: self.data_mode.then(|| vec![0.0; trows * tcols]),
            });
            bank_ids.push(bank);
        }
        self.blocks.push(Some(PsumBlock {
            rows,
            cols,
            grid_rows,
            grid_cols,
            banks: bank_ids,
        }));
        Ok(PsumId(self.blocks.len() - 1))
    }

    pub fn psum_free(&mut self, id: PsumId) -> Result<(), MachineError> {
        let block = self.blocks[id.0]
            .take()
            .ok_or(MachineError::BankNotAllocated { bank: id.0 })?;
        for b in block.banks {
            self.banks[b] = None;
        }
        Ok(())
    }

    pub fn psum_block_dims(&self, id: PsumId) -> (usize, usize) {
        let b = self.blocks[id.0].as_ref().expect("live block");
        (b.rows, b.cols)
    }

    /// One tensor-engine instruction: `bank tile (+)= stationary^T x moving`.
    ///
    /// Both operand tiles share the contraction dimension on the partition
    /// axis. `start` overwrites the bank; otherwise the product accumulates
    /// onto the existing contents (f32 throughout). Operands must already be
    /// resident in SBUF.
    pub fn nki_matmul(
        &mut self,
        stationary: TileRef,
        moving: TileRef,
        block: PsumId,
        tile_row: usize,
        tile_col: usize,
        start: bool,
    ) -> Result<(), MachineError> {
        self.check_tile_limits(&stationary, &moving)?;
        for t in [&stationary, &moving] {
            let b = self.bufs.get(t.buf.0).ok_or(MachineError::BufferFreed(t.buf.0))?;
            if b.freed {
                return Err(MachineError::BufferFreed(t.buf.0));
            }
            if !b.resident {
                return Err(MachineError::BlockShape(format!(
                    "operand buffer {} not resident in sbuf",
                    t.buf.0
                )));
            }
            if t.row0 + t.rows > b.rows || t.col0 + t.cols > b.cols {
                return Err(MachineError::BlockShape(format!(
                    "tile {}x{} at ({},{}) outside buffer {}x{}",
                    t.rows, t.cols, t.row0, t.col0, b.rows, b.cols
                )));
            }
        }
        let blk = self.blocks[block.0]
            .as_ref()
            .ok_or(MachineError::BankNotAllocated { bank: block.0 })?;
        if tile_row >= blk.grid_rows || tile_col >= blk.grid_cols {
            return Err(MachineError::BankOutOfRange {
                bank: tile_row * blk.grid_cols + tile_col,
                banks: blk.banks.len(),
            });
        }
        let bank = blk.banks[tile_row * blk.grid_cols + tile_col];
        // Recency bump for resident operands.
        self.clock += 1;
        self.bufs[stationary.buf.0].last_touch = self.clock;
        self.clock += 1;
        self.bufs[moving.buf.0].last_touch = self.clock;
        let elem = self.bufs[stationary.buf.0].elem_bytes;
        let flops = 2 * (stationary.rows as u64) * (stationary.cols as u64) * (moving.cols as u64);
        self.ctr.matmul_flops += flops;
        self.phase_flops += flops;
        self.ctr.matmul_instruction_count += 1;
        self.ctr.psum_write_bytes += (stationary.cols * moving.cols * 4) as u64;
        self.ctr.sbuf_read_bytes +=
            ((stationary.rows * stationary.cols + moving.rows * moving.cols) * elem) as u64;
        if self.data_mode {
            self.tile_product(&stationary, &moving, bank, start)?;
        }
        Ok(())
    }

    fn check_tile_limits(&self, s: &TileRef, m: &TileRef) -> Result<(), MachineError> {
        if s.rows != m.rows {
            return Err(MachineError::ContractionMismatch {
                stationary: s.rows,
                moving: m.rows,
            });
        }
        if s.rows > self.cfg.stationary_tile_max[0] {
            return Err(MachineError::TileLimit {
                operand: "stationary",
                axis: "partition",
                got: s.rows,
                limit: self.cfg.stationary_tile_max[0],
            });
        }
        if s.cols > self.cfg.stationary_tile_max[1] {
            return Err(MachineError::TileLimit {
                operand: "stationary",
                axis: "free",
                got: s.cols,
                limit: self.cfg.stationary_tile_max[1],
            });
        }
        if m.rows > self.cfg.moving_tile_max[0] {
            return Err(MachineError::TileLimit {
                operand: "moving",
                axis: "partition",
                got: m.rows,
                limit: self.cfg.moving_tile_max[0],
            });
        }
        if m.cols > self.cfg.moving_tile_max[1] {
            return Err(MachineError::TileLimit {
                operand: "moving",
                axis: "free",
                got: m.cols,
                limit: self.cfg.moving_tile_max[1],
            });
        }
        if m.cols > self.cfg.psum_bank_f32_per_partition() {
            return Err(MachineError::BankCapacity {
                free_dim: m.cols,
                capacity: self.cfg.psum_bank_f32_per_partition(),
            });
        }
        Ok(())
    }

    /// f32 tile product into a bank: `bank (+)= s^T x m`.
    fn tile_product(
        &mut self,
        s: &TileRef,
        m: &TileRef,
        bank: usize,
        start: bool,
    ) -> Result<(), MachineError> {
        let tile = self.banks[bank].as_mut().expect("bank allocated");
        if tile.rows != s.cols || tile.cols != m.cols {
            return Err(MachineError::BlockShape(format!(
                "bank tile {}x{} vs product {}x{}",
                tile.rows, tile.cols, s.cols, m.cols
            )));
        }
        let mut out = tile.data.take().expect("data mode");
        if start {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        {
            let sb = &self.bufs[s.buf.0];
            let mb = &self.bufs[m.buf.0];
            let sd = sb.data.as_ref().expect("data mode");
            let md = mb.data.as_ref().expect("data mode");
            let (scols, mcols) = (sb.cols, mb.cols);
            for c in 0..s.rows {
                let srow = (s.row0 + c) * scols + s.col0;
                let mrow = (m.row0 + c) * mcols + m.col0;
                for a in 0..s.cols {
                    let sv = sd[srow + a];
                    if sv == 0.0 {
                        continue;
                    }
                    let orow = a * m.cols;
                    for b in 0..m.cols {
                        out[orow + b] += sv * md[mrow + b];
                    }
                }
            }
        }
        self.banks[bank].as_mut().unwrap().data = Some(out);
        Ok(())
    }

    /// Block-level matmul: `out (+)= s_block^T x m_block`, looping the tile
    /// grid with PSUM accumulation over the contraction tile axis.
    /// `s_block` is `kb x R` (pre-transposed), `m_block` is `kb x C`, and
    /// `out` is an `R x C` PSUM block. `start` controls whether this call
    /// begins the accumulation group or adds onto it.
    ///
    /// Spilled operands are transparently reloaded (one touch per block).
    pub fn matmul_block(
        &mut self,
        s: BufId,
        m: BufId,
        out: PsumId,
        start: bool,
    ) -> Result<(), MachineError> {
        let (kb, r, elem_s) = self.buf_dims(s);
        let (kb2, c, elem_m) = self.buf_dims(m);
        let blk = self.blocks[out.0]
            .as_ref()
            .ok_or(MachineError::BankNotAllocated { bank: out.0 })?;
        if kb != kb2 {
            return Err(MachineError::ContractionMismatch {
                stationary: kb,
                moving: kb2,
            });
        }
        if blk.rows != r || blk.cols != c {
            return Err(MachineError::BlockShape(format!(
                "psum block {}x{} vs product {}x{}",
                blk.rows, blk.cols, r, c
            )));
        }
        if elem_s != elem_m {
            return Err(MachineError::BlockShape(
                "operand blocks have different element widths".into(),
            ));
        }
        let kp_max = self.cfg.stationary_tile_max[0].min(self.cfg.moving_tile_max[0]);
        let sf_max = self.cfg.stationary_tile_max[1];
        let mf_max = self.cfg.psum_tile_cols();
        let (grid_rows, grid_cols) = (blk.grid_rows, blk.grid_cols);
        let t_k = kb.div_ceil(kp_max);

        self.touch(s)?;
        self.touch(m)?;

        // Counters in closed form; identical to the per-tile sums.
        let flops = 2 * (kb as u64) * (r as u64) * (c as u64);
        self.ctr.matmul_flops += flops;
        self.phase_flops += flops;
        self.ctr.matmul_instruction_count += (t_k * grid_rows * grid_cols) as u64;
        self.ctr.psum_write_bytes += (t_k as u64) * (r as u64) * (c as u64) * 4;
        self.ctr.sbuf_read_bytes += (kb * r * grid_cols + kb * c * grid_rows) as u64 * elem_s as u64;

        if self.data_mode {
            for gi in 0..grid_rows {
                let sf = sf_max.min(r - gi * sf_max);
                for gj in 0..grid_cols {
                    let mf = mf_max.min(c - gj * mf_max);
                    let bank = self.blocks[out.0].as_ref().unwrap().banks[gi * grid_cols + gj];
                    for kt in 0..t_k {
                        let kp = kp_max.min(kb - kt * kp_max);
                        let st = TileRef {
                            buf: s,
                            row0: kt * kp_max,
                            col0: gi * sf_max,
                            rows: kp,
                            cols: sf,
                        };
                        let mt = TileRef {
                            buf: m,
                            row0: kt * kp_max,
                            col0: gj * mf_max,
                            rows: kp,
                            cols: mf,
                        };
                        self.tile_product(&st, &mt, bank, start && kt == 0)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Evict a finished PSUM block into the top-left of an SBUF buffer,
    /// either overwriting or accumulating onto the existing contents. PSUM
    /// reads are charged at f32 width; the SBUF write is at the buffer's
    /// storage width, and bf16 destinations round the stored value.
    pub fn psum_evict(
        &mut self,
        src: PsumId,
        dst: BufId,
        accumulate: bool,
    ) -> Result<(), MachineError> {
        let blk = self.blocks[src.0]
            .as_ref()
            .ok_or(MachineError::BankNotAllocated { bank: src.0 })?;
        let (rows, cols) = (blk.rows, blk.cols);
        let (drows, dcols, elem) = self.buf_dims(dst);
        if rows > drows || cols > dcols {
            return Err(MachineError::DstTooSmall {
                needed_rows: rows,
                needed_cols: cols,
                rows: drows,
                cols: dcols,
            });
        }
        self.touch(dst)?;
        self.ctr.psum_read_bytes += (rows * cols * 4) as u64;
        self.ctr.sbuf_write_bytes += (rows * cols * elem) as u64;
        if self.data_mode {
            let blk = self.blocks[src.0].as_ref().unwrap();
            let tr = self.cfg.psum_tile_rows().min(self.cfg.partitions);
            let tc = self.cfg.psum_tile_cols();
            let mut writes = Vec::new();
            for gi in 0..blk.grid_rows {
                for gj in 0..blk.grid_cols {
                    let bank = blk.banks[gi * blk.grid_cols + gj];
                    let tile = self.banks[bank].as_ref().unwrap();
                    let td = tile.data.as_ref().expect("data mode");
                    for i in 0..tile.rows {
                        for j in 0..tile.cols {
                            writes.push((gi * tr + i, gj * tc + j, td[i * tile.cols + j]));
                        }
                    }
                }
            }
            let dd = self.bufs[dst.0].data.as_mut().expect("data mode");
            let round = elem == 2;
            for (i, j, v) in writes {
                let acc = if accumulate { dd[i * dcols + j] + v } else { v };
                dd[i * dcols + j] = if round { bf16::round(acc) } else { acc };
            }
        }
        Ok(())
    }

    /// Transpose a `rows x cols` region (top-left of `src`) into `dst` on
    /// the tensor engine, modeled as an identity matmul through PSUM:
    /// 2 * rows^2 * cols transpose FLOPs per call.
    pub fn tensor_transpose(
        &mut self,
        src: BufId,
        rows: usize,
        cols: usize,
        dst: BufId,
    ) -> Result<(), MachineError> {
        let limit = self.cfg.stationary_tile_max;
        if rows > limit[0] {
            return Err(MachineError::TileLimit {
                operand: "transpose",
                axis: "partition",
                got: rows,
                limit: limit[0],
            });
        }
        if cols > limit[1] {
            return Err(MachineError::TileLimit {
                operand: "transpose",
                axis: "free",
                got: cols,
                limit: limit[1],
            });
        }
        let (srows, scols, elem) = self.buf_dims(src);
        if rows > srows || cols > scols {
            return Err(MachineError::DstTooSmall {
                needed_rows: rows,
                needed_cols: cols,
                rows: srows,
                cols: scols,
            });
        }
        let (drows, dcols, _) = self.buf_dims(dst);
        if cols > drows || rows > dcols {
            return Err(MachineError::DstTooSmall {
                needed_rows: cols,
                needed_cols: rows,
                rows: drows,
                cols: dcols,
            });
        }
        self.touch(src)?;
        self.touch(dst)?;
        let flops = 2 * (rows as u64) * (rows as u64) * (cols as u64);
        self.ctr.transpose_flops += flops;
        self.phase_flops += flops;
        self.ctr.psum_write_bytes += (rows * cols * 4) as u64;
        self.ctr.psum_read_bytes += (rows * cols * 4) as u64;
        self.ctr.sbuf_read_bytes += (rows * cols * elem) as u64;
        self.ctr.sbuf_write_bytes += (rows * cols * elem) as u64;
        if self.data_mode {
            let sdata = self.bufs[src.0].data.as_ref().expect("data mode").clone();
            let scols_full = self.bufs[src.0].cols;
            let dcols_full = self.bufs[dst.0].cols;
            let dd = self.bufs[dst.0].data.as_mut().expect("data mode");
            for i in 0..rows {
                for j in 0..cols {
                    dd[j * dcols_full + i] = sdata[i * scols_full + j];
                }
            }
        }
        Ok(())
    }

    /// `dst = silu(gate) .* up` element-wise over the top-left region.
    /// Runs on the scalar/vector engines: SBUF traffic is counted, but no
    /// tensor-engine FLOPs or modeled time.
    pub fn elementwise_silu_mul(
        &mut self,
        gate: BufId,
        up: BufId,
        dst: BufId,
        rows: usize,
        cols: usize,
    ) -> Result<(), MachineError> {
        for id in [gate, up, dst] {
            let (brows, bcols, _) = self.buf_dims(id);
            if rows > brows || cols > bcols {
                return Err(MachineError::DstTooSmall {
                    needed_rows: rows,
                    needed_cols: cols,
                    rows: brows,
                    cols: bcols,
                });
            }
            self.touch(id)?;
        }
        let elem = self.bufs[dst.0].elem_bytes;
        self.ctr.sbuf_read_bytes += (2 * rows * cols * elem) as u64;
        self.ctr.sbuf_write_bytes += (rows * cols * elem) as u64;
        if self.data_mode {
            let g = self.bufs[gate.0].data.as_ref().expect("data mode").clone();
            let gcols = self.bufs[gate.0].cols;
            let u = self.bufs[up.0].data.as_ref().expect("data mode").clone();
            let ucols = self.bufs[up.0].cols;
            let dcols = self.bufs[dst.0].cols;
            let round = elem == 2;
            let dd = self.bufs[dst.0].data.as_mut().expect("data mode");
            for i in 0..rows {
                for j in 0..cols {
                    let v = crate::linalg::silu_scalar(g[i * gcols + j]) * u[i * ucols + j];
                    dd[i * dcols + j] = if round { bf16::round(v) } else { v };
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
