//! Horizontal domain decomposition and a simulated message-passing cluster.
//!
//! The global grid is split into an `s x s` array of equal square
//! subdomains. Each rank owns one subdomain plus a halo of width one that
//! mirrors the adjacent cells of its neighbours. Solvers talk to the rest of
//! the machine only through [`Communicator`]: halo exchanges and collective
//! sums. [`SerialComm`] is the single-domain implementation and [`RankComm`]
//! runs on top of any [`MessageTransport`], by default the in-process
//! [`InProcessTransport`] driven by [`run_ranks`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, Side};
use crate::grid::{CompensatedSum, Field, GridShape, Layout};

/// Width of the exchanged halo layer.
pub const HALO_SIZE: usize = 1;

/// How long a receive waits before reporting a deadlock.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Message tag of west/east halo faces.
pub const TAG_HALO_X: u32 = 1;
/// Message tag of south/north halo faces.
pub const TAG_HALO_Y: u32 = 2;
/// Message tag of reduction contributions.
pub const TAG_SUM: u32 = 3;

/// Assignment of square subdomains to ranks.
///
/// Rank `r` sits at coordinates `(r % s, r / s)`; `West`/`East` step in
/// `i`, `South`/`North` step in `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTopology {
    s: usize,
    global: GridShape,
    local: GridShape,
}

impl RankTopology {
    pub fn new(s: usize, global: GridShape) -> Result<Self> {
        if s == 0 {
            return Err(Error::Topology("need at least one rank per side".into()));
        }
        if !global.nx().is_multiple_of(s) || !global.ny().is_multiple_of(s) {
            return Err(Error::Topology(format!(
                "{}x{} columns cannot be split evenly over a {s}x{s} rank grid",
                global.nx(),
                global.ny()
            )));
        }
        let local = GridShape::new(global.nx() / s, global.ny() / s, global.nz(), global.halo())?;
        Ok(Self { s, global, local })
    }

    /// Topology for `p` ranks; `p` must be a perfect square.
    pub fn from_ranks(p: usize, global: GridShape) -> Result<Self> {
        Self::new(square_side(p)?, global)
    }

    pub fn ranks_per_side(&self) -> usize {
        self.s
    }

    pub fn size(&self) -> usize {
        self.s * self.s
    }

    pub fn global_shape(&self) -> &GridShape {
        &self.global
    }

    pub fn local_shape(&self) -> &GridShape {
        &self.local
    }

    pub fn coords(&self, rank: usize) -> (usize, usize) {
        (rank % self.s, rank / self.s)
    }

    pub fn rank_at(&self, ri: usize, rj: usize) -> usize {
        rj * self.s + ri
    }

    /// Neighbouring rank across `side`, or `None` on the physical boundary.
    pub fn neighbor(&self, rank: usize, side: Side) -> Option<usize> {
        let (ri, rj) = self.coords(rank);
        match side {
            Side::West => (ri > 0).then(|| self.rank_at(ri - 1, rj)),
            Side::East => (ri + 1 < self.s).then(|| self.rank_at(ri + 1, rj)),
            Side::South => (rj > 0).then(|| self.rank_at(ri, rj - 1)),
            Side::North => (rj + 1 < self.s).then(|| self.rank_at(ri, rj + 1)),
        }
    }

    /// `true` for every side of `rank` that lies on the physical boundary.
    pub fn boundary(&self, rank: usize) -> [bool; 4] {
        let mut b = [false; 4];
        for side in Side::ALL {
            b[side.index()] = self.neighbor(rank, side).is_none();
        }
        b
    }

    /// Global index offset of the first interior cell of `rank`: local
    /// `(i, j)` corresponds to global `(i + di, j + dj)`.
    pub fn global_offset(&self, rank: usize) -> (usize, usize) {
        let (ri, rj) = self.coords(rank);
        (ri * self.local.nx(), rj * self.local.ny())
    }

    /// Coefficients of the subdomain of `rank` cut from the whole-domain
    /// flat-box geometry `global`.
    pub fn local_geometry(&self, global: &Geometry) -> Geometry {
        Geometry::flat_box_block(global.params, self.local.nx(), self.local.ny(), self.local.nz())
    }

    /// The part of the whole-domain field `global` owned by `rank`.
    pub fn scatter(&self, rank: usize, global: &Field) -> Result<Field> {
        if !global.shape().same_interior(&self.global) {
            return Err(Error::Shape("field does not cover the global grid".into()));
        }
        let (di, dj) = self.global_offset(rank);
        let mut out = Field::zeros(self.local);
        for j in 1..=self.local.ny() {
            for k in 0..self.local.nz() {
                for i in 1..=self.local.nx() {
                    let v = global.get((i + di) as isize, (j + dj) as isize, k as isize)?;
                    out.set(i as isize, j as isize, k as isize, v)?;
                }
            }
        }
        Ok(out)
    }

    /// Reassembles the whole-domain field from the per-rank fields in rank order.
    pub fn gather(&self, locals: &[Field]) -> Result<Field> {
        if locals.len() != self.size() {
            return Err(Error::Topology(format!("expected {} local fields, got {}", self.size(), locals.len())));
        }
        let mut out = Field::zeros(self.global);
        for (rank, local) in locals.iter().enumerate() {
            if !local.shape().same_interior(&self.local) {
                return Err(Error::Shape(format!("field of rank {rank} does not match the subdomain")));
            }
            let (di, dj) = self.global_offset(rank);
            for j in 1..=self.local.ny() {
                for k in 0..self.local.nz() {
                    for i in 1..=self.local.nx() {
                        let v = local.get(i as isize, j as isize, k as isize)?;
                        out.set((i + di) as isize, (j + dj) as isize, k as isize, v)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `s` with `s * s == p`.
pub fn square_side(p: usize) -> Result<usize> {
    let s = (p as f64).sqrt().round() as usize;
    if p == 0 || s * s != p {
        return Err(Error::Topology(format!("{p} ranks do not form a square grid")));
    }
    Ok(s)
}

/// The degrees of freedom registered for exchange in one dimension:
/// halo widths below and above the interior, the first and last interior
/// storage index and the allocated length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HaloDimension {
    pub minus: usize,
    pub plus: usize,
    pub begin: usize,
    pub end: usize,
    pub total: usize,
}

/// Per-dimension halo description of a field, in `(x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HaloRegistration {
    pub dims: [HaloDimension; 3],
}

impl HaloRegistration {
    pub fn for_shape(shape: &GridShape) -> Self {
        let dim = |n: usize, ol: usize| HaloDimension {
            minus: HALO_SIZE,
            plus: HALO_SIZE,
            begin: ol,
            end: ol + n - 1,
            total: n + 2 * ol,
        };
        Self {
            dims: [
                dim(shape.nx(), shape.ol_x()),
                dim(shape.ny(), shape.ol_y()),
                HaloDimension {
                    minus: 0,
                    plus: 0,
                    begin: 0,
                    end: shape.nz() - 1,
                    total: shape.nz(),
                },
            ],
        }
    }

    /// Values transferred through one face normal to dimension `d`
    /// (`d = 0` for x, `1` for y), corners excluded.
    pub fn face_values(&self, d: usize) -> usize {
        let other = 1 - d;
        let [_, _, z] = self.dims;
        let o = &self.dims[other];
        (o.end - o.begin + 1) * z.total * HALO_SIZE
    }
}

/// Point-to-point delivery of tagged byte buffers.
///
/// Messages on one `(source, dest, tag)` channel arrive in the order they
/// were sent.
pub trait MessageTransport: Send + Sync {
    fn send(&self, source: usize, dest: usize, tag: u32, payload: Vec<u8>) -> Result<()>;
    fn receive(&self, dest: usize, source: usize, tag: u32) -> Result<Vec<u8>>;
    /// Wakes all blocked receivers with an error; used when a rank fails.
    fn abort(&self);
}

#[derive(Default)]
struct Mailboxes {
    queues: HashMap<(usize, usize, u32), VecDeque<Vec<u8>>>,
}

/// Shared-memory transport for ranks running as threads of one process.
pub struct InProcessTransport {
    size: usize,
    boxes: Mutex<Mailboxes>,
    arrived: Condvar,
    aborted: AtomicBool,
    timeout: Duration,
    sent_bytes: Vec<AtomicU64>,
    sent_by_tag: Mutex<BTreeMap<(usize, u32), u64>>,
}

impl InProcessTransport {
    pub fn new(size: usize) -> Self {
        Self::with_timeout(size, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(size: usize, timeout: Duration) -> Self {
        Self {
            size,
            boxes: Mutex::new(Mailboxes::default()),
            arrived: Condvar::new(),
            aborted: AtomicBool::new(false),
            timeout,
            sent_bytes: (0..size).map(|_| AtomicU64::new(0)).collect(),
            sent_by_tag: Mutex::new(BTreeMap::new()),
        }
    }

    /// Total payload bytes sent by `rank` so far.
    pub fn sent_bytes(&self, rank: usize) -> u64 {
        self.sent_bytes[rank].load(Ordering::Relaxed)
    }

    /// Payload bytes sent by `rank` with message tag `tag`.
    pub fn sent_bytes_with_tag(&self, rank: usize, tag: u32) -> u64 {
        let by_tag = self.sent_by_tag.lock().unwrap_or_else(|e| e.into_inner());
        by_tag.get(&(rank, tag)).copied().unwrap_or(0)
    }

    /// Payload bytes of halo messages sent by `rank`.
    pub fn sent_halo_bytes(&self, rank: usize) -> u64 {
        self.sent_bytes_with_tag(rank, TAG_HALO_X) + self.sent_bytes_with_tag(rank, TAG_HALO_Y)
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.size {
            return Err(Error::Topology(format!(
                "rank {rank} outside a machine of {} ranks",
                self.size
            )));
        }
        Ok(())
    }
}

impl MessageTransport for InProcessTransport {
    fn send(&self, source: usize, dest: usize, tag: u32, payload: Vec<u8>) -> Result<()> {
        self.check_rank(source)?;
        self.check_rank(dest)?;
        self.sent_bytes[source].fetch_add(payload.len() as u64, Ordering::Relaxed);
        *self
            .sent_by_tag
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry((source, tag))
            .or_default() += payload.len() as u64;
        let mut boxes = self.boxes.lock().unwrap_or_else(|e| e.into_inner());
        boxes
            .queues
            .entry((source, dest, tag))
            .or_default()
            .push_back(payload);
        self.arrived.notify_all();
        Ok(())
    }

    fn receive(&self, dest: usize, source: usize, tag: u32) -> Result<Vec<u8>> {
        self.check_rank(source)?;
        self.check_rank(dest)?;
        let deadline = Instant::now() + self.timeout;
        let mut boxes = self.boxes.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(msg) = boxes
                .queues
                .get_mut(&(source, dest, tag))
                .and_then(|q| q.pop_front())
            {
                return Ok(msg);
            }
            if self.aborted.load(Ordering::SeqCst) {
                return Err(Error::Exchange(format!(
                    "rank {dest} stopped waiting for rank {source}: another rank failed"
                )));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout {
                    rank: dest,
                    source_rank: source,
                    tag,
                });
            }
            boxes = self
                .arrived
                .wait_timeout(boxes, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        let _guard = self.boxes.lock().unwrap_or_else(|e| e.into_inner());
        self.arrived.notify_all();
    }
}

/// One line of the halo traffic log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteLogRow {
    pub iteration: usize,
    pub level: usize,
    pub direction: Side,
    pub bytes: u64,
}

/// Exchange bookkeeping kept by every communicator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommStats {
    /// Halo exchanges per multigrid level (level 0 is the coarsest).
    pub exchanges_per_level: BTreeMap<usize, u64>,
    /// Every halo message sent, tagged with the solver iteration.
    pub byte_log: Vec<ByteLogRow>,
    /// Number of collective reductions.
    pub reductions: u64,
}

impl CommStats {
    pub fn total_exchanges(&self) -> u64 {
        self.exchanges_per_level.values().sum()
    }

    /// Halo bytes sent during `iteration`.
    pub fn halo_bytes(&self, iteration: usize) -> u64 {
        self.byte_log
            .iter()
            .filter(|r| r.iteration == iteration)
            .map(|r| r.bytes)
            .sum()
    }

    /// The byte log as CSV with columns `iteration,level,direction,bytes`.
    pub fn byte_log_csv(&self) -> String {
        let mut out = String::from("iteration,level,direction,bytes\n");
        for r in &self.byte_log {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration,
                r.level,
                r.direction.name(),
                r.bytes
            ));
        }
        out
    }
}

/// The operations solvers need from the parallel machine.
pub trait Communicator {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;

    /// Physical-boundary flags of the local subdomain, indexed by [`Side::index`].
    fn boundary(&self) -> [bool; 4];

    /// Refreshes the width-one halo of `field`. Faces on the physical boundary
    /// are set to zero. With `corners` the diagonal halo cells are filled too.
    fn exchange_halos(&mut self, field: &mut Field, corners: bool, level: usize) -> Result<()>;

    /// Element-wise sum of compensated partial sums over all ranks, merged
    /// in rank order and rounded once.
    fn reduce(&mut self, local: &[CompensatedSum]) -> Result<Vec<f64>>;

    /// Element-wise sum of `local` over all ranks.
    fn global_sum(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        let parts: Vec<CompensatedSum> = local.iter().map(|&v| v.into()).collect();
        self.reduce(&parts)
    }

    /// Marks the start of solver iteration `iteration` for the traffic log.
    fn begin_iteration(&mut self, iteration: usize);

    fn stats(&self) -> &CommStats;
}

/// Communicator for a single domain covering the whole grid.
#[derive(Debug, Clone, Default)]
pub struct SerialComm {
    stats: CommStats,
}

impl SerialComm {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Communicator for SerialComm {
    fn rank(&self) -> usize {
        0
    }

    fn size(&self) -> usize {
        1
    }

    fn boundary(&self) -> [bool; 4] {
        [true; 4]
    }

    fn exchange_halos(&mut self, field: &mut Field, _corners: bool, level: usize) -> Result<()> {
        check_exchange_layout(field)?;
        for side in Side::ALL {
            zero_face(field, side);
        }
        *self.stats.exchanges_per_level.entry(level).or_default() += 1;
        Ok(())
    }

    fn reduce(&mut self, local: &[CompensatedSum]) -> Result<Vec<f64>> {
        self.stats.reductions += 1;
        Ok(local.iter().map(CompensatedSum::value).collect())
    }

    fn begin_iteration(&mut self, _iteration: usize) {}

    fn stats(&self) -> &CommStats {
        &self.stats
    }
}

/// Communicator of one rank in a decomposed run.
pub struct RankComm {
    rank: usize,
    topology: Arc<RankTopology>,
    transport: Arc<dyn MessageTransport>,
    iteration: usize,
    stats: CommStats,
}

impl RankComm {
    pub fn new(rank: usize, topology: Arc<RankTopology>, transport: Arc<dyn MessageTransport>) -> Result<Self> {
        if rank >= topology.size() {
            return Err(Error::Topology(format!(
                "rank {rank} outside a machine of {} ranks",
                topology.size()
            )));
        }
        Ok(Self {
            rank,
            topology,
            transport,
            iteration: 0,
            stats: CommStats::default(),
        })
    }

    pub fn topology(&self) -> &RankTopology {
        &self.topology
    }

    fn send_face(&mut self, field: &Field, side: Side, corners: bool, level: usize) -> Result<()> {
        let Some(dest) = self.topology.neighbor(self.rank, side) else {
            return Ok(());
        };
        let values = pack_face(field, side, corners);
        let bytes = to_bytes(&values);
        self.stats.byte_log.push(ByteLogRow {
            iteration: self.iteration,
            level,
            direction: side,
            bytes: bytes.len() as u64,
        });
        let tag = match side {
            Side::West | Side::East => TAG_HALO_X,
            Side::South | Side::North => TAG_HALO_Y,
        };
        self.transport.send(self.rank, dest, tag, bytes)
    }

    fn receive_face(&mut self, field: &mut Field, side: Side, corners: bool) -> Result<()> {
        let Some(source) = self.topology.neighbor(self.rank, side) else {
            zero_face(field, side);
            return Ok(());
        };
        let tag = match side {
            Side::West | Side::East => TAG_HALO_X,
            Side::South | Side::North => TAG_HALO_Y,
        };
        let values = from_bytes(&self.transport.receive(self.rank, source, tag)?)?;
        unpack_face(field, side, corners, &values)
    }
}

impl Communicator for RankComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.topology.size()
    }

    fn boundary(&self) -> [bool; 4] {
        self.topology.boundary(self.rank)
    }

    fn exchange_halos(&mut self, field: &mut Field, corners: bool, level: usize) -> Result<()> {
        check_exchange_layout(field)?;
        // x faces first; the y faces then carry the freshly received x halo
        // columns so that corner cells reach diagonal neighbours.
        self.send_face(field, Side::West, false, level)?;
        self.send_face(field, Side::East, false, level)?;
        self.receive_face(field, Side::West, false)?;
        self.receive_face(field, Side::East, false)?;
        self.send_face(field, Side::South, corners, level)?;
        self.send_face(field, Side::North, corners, level)?;
        self.receive_face(field, Side::South, corners)?;
        self.receive_face(field, Side::North, corners)?;
        *self.stats.exchanges_per_level.entry(level).or_default() += 1;
        Ok(())
    }

    fn reduce(&mut self, local: &[CompensatedSum]) -> Result<Vec<f64>> {
        self.stats.reductions += 1;
        let p = self.size();
        let flat: Vec<f64> = local.iter().flat_map(|c| [c.sum, c.carry]).collect();
        let payload = to_bytes(&flat);
        for dest in (0..p).filter(|&d| d != self.rank) {
            self.transport.send(self.rank, dest, TAG_SUM, payload.clone())?;
        }
        let mut sum = vec![CompensatedSum::default(); local.len()];
        for source in 0..p {
            let part = if source == self.rank {
                flat.clone()
            } else {
                from_bytes(&self.transport.receive(self.rank, source, TAG_SUM)?)?
            };
            if part.len() != flat.len() {
                return Err(Error::Exchange(format!(
                    "rank {source} contributed {} values to a reduction of {}",
                    part.len() / 2,
                    local.len()
                )));
            }
            sum.iter_mut()
                .zip(part.chunks_exact(2))
                .for_each(|(s, pair)| s.merge(CompensatedSum::new(pair[0], pair[1])));
        }
        Ok(sum.iter().map(CompensatedSum::value).collect())
    }

    fn begin_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    fn stats(&self) -> &CommStats {
        &self.stats
    }
}

fn check_exchange_layout(field: &Field) -> Result<()> {
    if field.layout() != Layout::XContiguous {
        return Err(Error::Exchange("halo exchange needs the x-contiguous layout".into()));
    }
    if field.shape().halo() < HALO_SIZE {
        return Err(Error::Exchange("field has no halo".into()));
    }
    Ok(())
}

/// Storage coordinates `(si, sj)` of the cells sent through `side` (interior
/// layer) or received into it (halo layer), in transfer order.
fn face_cells(shape: &GridShape, side: Side, corners: bool, halo_layer: bool) -> Vec<(usize, usize)> {
    let (nx, ny, ox, oy) = (shape.nx(), shape.ny(), shape.ol_x(), shape.ol_y());
    match side {
        Side::West | Side::East => {
            let si = match (side, halo_layer) {
                (Side::West, false) => ox,
                (Side::West, true) => ox - 1,
                (_, false) => ox + nx - 1,
                (_, true) => ox + nx,
            };
            (oy..oy + ny).map(|sj| (si, sj)).collect()
        }
        Side::South | Side::North => {
            let sj = match (side, halo_layer) {
                (Side::South, false) => oy,
                (Side::South, true) => oy - 1,
                (_, false) => oy + ny - 1,
                (_, true) => oy + ny,
            };
            let range = if corners { ox - 1..ox + nx + 1 } else { ox..ox + nx };
            range.map(|si| (si, sj)).collect()
        }
    }
}

fn pack_face(field: &Field, side: Side, corners: bool) -> Vec<f64> {
    let s = *field.shape();
    let cells = face_cells(&s, side, corners, false);
    let data = field.data();
    let mut out = Vec::with_capacity(cells.len() * s.nz());
    for &(si, sj) in &cells {
        for k in 0..s.nz() {
            out.push(data[s.x_offset(si, sj, k)]);
        }
    }
    out
}

/// Writes values received from the neighbour across `side` into the halo.
/// The neighbour's interior face on the opposite side arrives in the same
/// order as this rank's halo cells.
fn unpack_face(field: &mut Field, side: Side, corners: bool, values: &[f64]) -> Result<()> {
    let s = *field.shape();
    let cells = face_cells(&s, side, corners, true);
    if values.len() != cells.len() * s.nz() {
        return Err(Error::Topology(format!(
            "received {} halo values across the {} face, expected {}",
            values.len(),
            side.name(),
            cells.len() * s.nz()
        )));
    }
    let data = field.data_mut();
    let mut it = values.iter();
    for &(si, sj) in &cells {
        for k in 0..s.nz() {
            data[s.x_offset(si, sj, k)] = *it.next().expect("length checked");
        }
    }
    Ok(())
}

/// Zeroes the halo layer on `side`, corners included.
fn zero_face(field: &mut Field, side: Side) {
    let s = *field.shape();
    let cells = match side {
        Side::West | Side::East => {
            let si = if side == Side::West { s.ol_x() - 1 } else { s.ol_x() + s.nx() };
            (s.ol_y() - 1..s.ol_y() + s.ny() + 1).map(|sj| (si, sj)).collect::<Vec<_>>()
        }
        Side::South | Side::North => face_cells(&s, side, true, true),
    };
    let data = field.data_mut();
    for (si, sj) in cells {
        for k in 0..s.nz() {
            data[s.x_offset(si, sj, k)] = 0.0;
        }
    }
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Exchange(format!("message of {} bytes is not a whole number of doubles", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Halo bytes sent by `rank` for `n_halo` exchanges of width-one halos on
/// its local grid. Faces on the physical boundary carry nothing.
pub fn exchange_byte_count(topology: &RankTopology, rank: usize, n_halo: usize) -> u64 {
    let l = topology.local_shape();
    let b = topology.boundary(rank);
    let mut values = 0;
    for side in Side::ALL {
        if !b[side.index()] {
            values += match side {
                Side::West | Side::East => l.ny(),
                Side::South | Side::North => l.nx(),
            };
        }
    }
    (values * l.nz() * std::mem::size_of::<f64>() * HALO_SIZE * n_halo) as u64
}

/// Halo bytes sent by `rank` for `n_halo` exchanges that also fill the
/// diagonal halo cells: every south/north message carries the two corner
/// values of each row in addition to the face.
pub fn corner_exchange_byte_count(topology: &RankTopology, rank: usize, n_halo: usize) -> u64 {
    let b = topology.boundary(rank);
    let y_faces = [Side::South, Side::North].iter().filter(|s| !b[s.index()]).count();
    let corners = y_faces * 2 * HALO_SIZE * topology.local_shape().nz() * std::mem::size_of::<f64>() * HALO_SIZE;
    exchange_byte_count(topology, rank, n_halo) + (corners * n_halo) as u64
}

/// Halo bytes per exchange round for a rank with four neighbours.
pub fn interior_exchange_bytes(nx: usize, ny: usize, nz: usize, n_halo: usize) -> u64 {
    (2 * (nx + ny) * nz * std::mem::size_of::<f64>() * HALO_SIZE * n_halo) as u64
}

/// Runs `program` on every rank of `topology` concurrently, wired through a
/// fresh [`InProcessTransport`], and returns the results in rank order.
pub fn run_ranks<T, F>(topology: &RankTopology, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut RankComm) -> Result<T> + Sync,
{
    run_ranks_with_timeout(topology, DEFAULT_TIMEOUT, program)
}

pub fn run_ranks_with_timeout<T, F>(topology: &RankTopology, timeout: Duration, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut RankComm) -> Result<T> + Sync,
{
    let p = topology.size();
    let topo = Arc::new(topology.clone());
    let transport = Arc::new(InProcessTransport::with_timeout(p, timeout));
    let outcomes: Vec<std::result::Result<T, (Error, bool)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..p)
            .map(|rank| {
                let topo = Arc::clone(&topo);
                let transport = Arc::clone(&transport);
                let program = &program;
                scope.spawn(move || {
                    let dyn_transport: Arc<dyn MessageTransport> = transport.clone();
                    let outcome = catch_unwind(AssertUnwindSafe(|| {
                        let mut comm = RankComm::new(rank, topo, dyn_transport)?;
                        program(&mut comm)
                    }));
                    match outcome {
                        Ok(Ok(v)) => Ok(v),
                        Ok(Err(e)) => {
                            let secondary = transport.aborted.load(Ordering::SeqCst);
                            transport.abort();
                            Err((e, secondary))
                        }
                        Err(panic) => {
                            transport.abort();
                            let message = panic
                                .downcast_ref::<&str>()
                                .map(|s| s.to_string())
                                .or_else(|| panic.downcast_ref::<String>().cloned())
                                .unwrap_or_else(|| "panicked".into());
                            Err((Error::Rank { rank, message: format!("panicked: {message}") }, false))
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank threads catch their own panics"))
            .collect()
    });

    let mut results = Vec::with_capacity(p);
    let mut first: Option<Error> = None;
    let mut fallback: Option<Error> = None;
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(v) => results.push(v),
            Err((e, secondary)) => {
                let e = match e {
                    Error::Rank { .. } => e,
                    other => Error::Rank {
                        rank,
                        message: other.to_string(),
                    },
                };
                if secondary {
                    fallback.get_or_insert(e);
                } else {
                    first.get_or_insert(e);
                }
            }
        }
    }
    match first.or(fallback) {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(s: usize, n: usize, nz: usize) -> RankTopology {
        RankTopology::new(s, GridShape::new(n, n, nz, 1).unwrap()).unwrap()
    }

    fn global_id(n: usize, nz: usize, gi: usize, gj: usize, k: usize) -> f64 {
        ((gj * n + gi) * nz + k) as f64 + 1.0
    }

    #[test]
    fn topology_neighbors_and_boundaries() {
        let t = topo(4, 16, 2);
        assert_eq!(t.size(), 16);
        assert_eq!(t.coords(6), (2, 1));
        assert_eq!(t.neighbor(5, Side::West), Some(4));
        assert_eq!(t.neighbor(5, Side::North), Some(9));
        assert_eq!(t.neighbor(0, Side::South), None);
        assert_eq!(t.boundary(0), [true, false, true, false]);
        assert_eq!(t.boundary(5), [false; 4]);
        assert_eq!(t.global_offset(6), (8, 4));
        assert!(RankTopology::new(3, GridShape::new(16, 16, 2, 1).unwrap()).is_err());
        assert!(RankTopology::from_ranks(8, GridShape::new(16, 16, 2, 1).unwrap()).is_err());
    }

    #[test]
    fn registration_excludes_padding() {
        let shape = GridShape::new(6, 4, 3, 1).unwrap().with_x_padding(3).unwrap();
        let r = HaloRegistration::for_shape(&shape);
        assert_eq!(r.dims[0], HaloDimension { minus: 1, plus: 1, begin: 3, end: 8, total: 12 });
        assert_eq!(r.dims[2].minus, 0);
        assert_eq!(r.face_values(0), 4 * 3);
        assert_eq!(r.face_values(1), 6 * 3);
    }

    #[test]
    fn serial_exchange_zeroes_halos_and_sends_nothing() {
        let shape = GridShape::new(3, 3, 2, 1).unwrap();
        let mut f = Field::zeros(shape);
        f.data_mut().iter_mut().for_each(|v| *v = 7.0);
        let mut comm = SerialComm::new();
        comm.exchange_halos(&mut f, true, 0).unwrap();
        assert_eq!(f.get(0, 0, 0).unwrap(), 0.0);
        assert_eq!(f.get(4, 2, 1).unwrap(), 0.0);
        assert_eq!(f.get(2, 4, 1).unwrap(), 0.0);
        assert_eq!(f.get(2, 2, 1).unwrap(), 7.0);
        assert!(comm.stats().byte_log.is_empty());
        assert_eq!(comm.global_sum(&[2.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn halos_match_global_coordinates() {
        for (s, corners) in [(2, false), (2, true), (4, true)] {
            let (n, nz) = (8, 3);
            let t = topo(s, n, nz);
            run_ranks(&t, |comm| {
                let (di, dj) = comm.topology().global_offset(comm.rank());
                let local = *comm.topology().local_shape();
                let mut f = Field::from_fn(local, |i, j, k| global_id(n, nz, di + i - 1, dj + j - 1, k));
                comm.exchange_halos(&mut f, corners, 0)?;
                let (nl, ml) = (local.nx() as isize, local.ny() as isize);
                for j in 0..=ml + 1 {
                    for i in 0..=nl + 1 {
                        let corner = (i == 0 || i == nl + 1) && (j == 0 || j == ml + 1);
                        let interior = (1..=nl).contains(&i) && (1..=ml).contains(&j);
                        if interior || (corner && !corners) {
                            continue;
                        }
                        let gi = di as isize + i - 1;
                        let gj = dj as isize + j - 1;
                        for k in 0..nz {
                            let got = f.get(i, j, k as isize)?;
                            let outside = gi < 0 || gj < 0 || gi >= n as isize || gj >= n as isize;
                            let want = if outside {
                                0.0
                            } else {
                                global_id(n, nz, gi as usize, gj as usize, k)
                            };
                            assert_eq!(got, want, "rank {} cell ({i},{j},{k})", comm.rank());
                        }
                    }
                }
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn constant_field_sees_constant_interior_halos() {
        let t = topo(2, 8, 2);
        run_ranks(&t, |comm| {
            let mut f = Field::zeros(*comm.topology().local_shape());
            f.fill(3.0);
            comm.exchange_halos(&mut f, false, 0)?;
            let b = comm.boundary();
            let probe = [(0, 2), (5, 2), (2, 0), (2, 5)];
            for (side, (i, j)) in Side::ALL.into_iter().zip(probe) {
                let want = if b[side.index()] { 0.0 } else { 3.0 };
                assert_eq!(f.get(i, j, 1)?, want);
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn global_sum_is_rank_ordered_and_identical() {
        let t = topo(4, 8, 1);
        let contrib = |r: usize| [1.0, 0.1 * (r as f64 + 1.0).powi(3), 1e16 * (-1f64).powi(r as i32)];
        let sums = run_ranks(&t, |comm| comm.global_sum(&contrib(comm.rank()))).unwrap();
        let mut want = [CompensatedSum::default(); 3];
        for r in 0..16 {
            for (w, c) in want.iter_mut().zip(contrib(r)) {
                w.add(c);
            }
        }
        let want: Vec<f64> = want.iter().map(CompensatedSum::value).collect();
        for s in &sums {
            assert_eq!(s, &want);
        }
        assert_eq!(sums[0][0], 16.0);
        assert_eq!(sums[0][2], 0.0);
    }

    #[test]
    fn measured_bytes_match_the_formula() {
        let t = topo(2, 16, 4);
        let bytes = run_ranks(&t, |comm| {
            let mut f = Field::zeros(*comm.topology().local_shape());
            comm.begin_iteration(1);
            comm.exchange_halos(&mut f, false, 0)?;
            Ok(comm.stats().halo_bytes(1))
        })
        .unwrap();
        for (rank, b) in bytes.into_iter().enumerate() {
            assert_eq!(b, exchange_byte_count(&t, rank, 1));
            assert_eq!(b, 2 * 8 * 4 * 8);
        }
        assert_eq!(interior_exchange_bytes(128, 128, 128, 1), 524288);
        assert_eq!(interior_exchange_bytes(128, 128, 128, 0), 0);
        let t4 = topo(4, 16, 4);
        assert_eq!(exchange_byte_count(&t4, 5, 1), interior_exchange_bytes(4, 4, 4, 1));
    }

    #[test]
    fn rank_failure_is_reported_by_rank() {
        let t = topo(2, 4, 1);
        let err = run_ranks_with_timeout(&t, Duration::from_secs(5), |comm| {
            if comm.rank() == 2 {
                panic!("boom");
            }
            comm.global_sum(&[1.0])
        })
        .unwrap_err();
        match err {
            Error::Rank { rank, message } => {
                assert_eq!(rank, 2);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_participant_times_out() {
        let t = topo(2, 4, 1);
        let err = run_ranks_with_timeout(&t, Duration::from_millis(200), |comm| {
            if comm.rank() == 3 {
                return Ok(vec![]);
            }
            comm.global_sum(&[1.0])
        })
        .unwrap_err();
        assert!(err.to_string().contains("timed out"), "{err}");
    }
}
