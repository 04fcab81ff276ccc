"""Linear octree over the cube [-1,1]^3.

Nodes are keyed by (depth, Morton code) and stored as per-depth sorted code
arrays with parallel nonempty flags.  The tree is forced full down to
``full_depth`` = min(4, max_depth); beyond that, exactly the nonempty nodes
are subdivided, always allocating all 8 children (emptiness is a flag, not
absence), so the leaf cells of any tree tile the cube exactly.

Morton convention (frozen for checkpoint compatibility): within each 3-bit
triple x occupies the lowest bit, then y, then z; child j of (d, m) is
(d+1, (m << 3) | j), i.e. the finest level lives in the low bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DepthMismatch, DepthOverflow, EmptyInput, OctgenError, OutOfDomain, OutOfRange

# directed dual-graph edge kinds
KIND_SELF = 0
KIND_XP, KIND_XM = 1, 2
KIND_YP, KIND_YM = 3, 4
KIND_ZP, KIND_ZM = 5, 6
N_KINDS = 7
KIND_NAMES = ("self", "+x", "-x", "+y", "-y", "+z", "-z")
_KIND_MIRROR = (0, 2, 1, 4, 3, 6, 5)
_KIND_OFFSET = {
    KIND_XP: (1, 0, 0),
    KIND_XM: (-1, 0, 0),
    KIND_YP: (0, 1, 0),
    KIND_YM: (0, -1, 0),
    KIND_ZP: (0, 0, 1),
    KIND_ZM: (0, 0, -1),
}


def mirror_kind(kind: int) -> int:
    return _KIND_MIRROR[kind]


# -- Morton codes ---------------------------------------------------------


def _spread3(v):
    """Insert two zero bits between each of the low 21 bits."""
    v = np.asarray(v, dtype=np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(x, y, z, depth: int):
    """Interleave integer cell coordinates into a Morton key at ``depth``."""
    x = np.asarray(x)
    y = np.asarray(y)
    z = np.asarray(z)
    lim = 1 << depth
    if np.any((x < 0) | (x >= lim) | (y < 0) | (y >= lim) | (z < 0) | (z >= lim)):
        raise OutOfRange(f"coordinates out of [0, 2^{depth}) range")
    code = _spread3(x) | (_spread3(y) << np.uint64(1)) | (_spread3(z) << np.uint64(2))
    return code if code.ndim else int(code)


def morton_decode(code, depth: int):
    code = np.asarray(code, dtype=np.uint64)
    if np.any(code >= np.uint64(1) << np.uint64(3 * depth)):
        raise OutOfRange(f"code out of range for depth {depth}")
    x = _compact3(code)
    y = _compact3(code >> np.uint64(1))
    z = _compact3(code >> np.uint64(2))
    if x.ndim:
        return x.astype(np.int64), y.astype(np.int64), z.astype(np.int64)
    return int(x), int(y), int(z)


def parent_of(key):
    depth, code = key
    if depth <= 0:
        raise OutOfRange("root has no parent")
    return (depth - 1, int(code) >> 3)


def children_of(key):
    depth, code = key
    base = int(code) << 3
    return [(depth + 1, base | j) for j in range(8)]


def cell_center(depth, code):
    """Center of the cell (depth, code) in domain coordinates."""
    x, y, z = morton_decode(np.asarray(code, dtype=np.uint64), depth)
    size = 2.0 / (1 << depth)
    pts = (np.stack([x, y, z], axis=-1).astype(np.float64) + 0.5) * size - 1.0
    return pts


def cell_size(depth: int) -> float:
    """Edge length of a cell at ``depth``."""
    return 2.0 / (1 << depth)


# -- Octree ------------------------------------------------------------------


@dataclass
class Octree:
    """Per-depth sorted code arrays plus nonempty flags; immutable once built."""

    max_depth: int
    codes: list  # uint64 arrays, index = depth
    nonempty: list  # bool arrays parallel to codes
    full_depth: int = field(default=-1)

    def __post_init__(self):
        if self.full_depth < 0:
            self.full_depth = min(4, self.max_depth)
        self._leaf_cache = None

    def num_nodes(self, depth: int) -> int:
        return len(self.codes[depth]) if depth <= self.max_depth else 0

    def finest_populated(self) -> int:
        for d in range(self.max_depth, -1, -1):
            if len(self.codes[d]):
                return d
        return 0

    def is_split(self, depth: int) -> np.ndarray:
        """Whether each node at ``depth`` has (all 8) children."""
        if depth < self.full_depth:
            return np.ones(self.num_nodes(depth), dtype=bool)
        if depth >= self.max_depth or self.num_nodes(depth + 1) == 0:
            return np.zeros(self.num_nodes(depth), dtype=bool)
        parents = self.codes[depth + 1][::8] >> np.uint64(3)
        out = np.zeros(self.num_nodes(depth), dtype=bool)
        out[np.searchsorted(self.codes[depth], parents)] = True
        return out

    def is_leaf(self, depth: int) -> np.ndarray:
        return ~self.is_split(depth)

    def leaves(self):
        """Canonical leaf list as (depths, codes), ascending (depth, morton).

        This ordering is the feature-row order used by every network.
        """
        if self._leaf_cache is None:
            ds, cs = [], []
            for d in range(self.max_depth + 1):
                mask = self.is_leaf(d)
                if mask.any():
                    ds.append(np.full(int(mask.sum()), d, dtype=np.int8))
                    cs.append(self.codes[d][mask])
            self._leaf_cache = (
                np.concatenate(ds) if ds else np.zeros(0, np.int8),
                np.concatenate(cs) if cs else np.zeros(0, np.uint64),
            )
        return self._leaf_cache

    def num_leaves(self) -> int:
        return len(self.leaves()[0])

    def find(self, depth: int, codes) -> np.ndarray:
        """Row indices of ``codes`` at ``depth``; -1 where absent."""
        codes = np.asarray(codes, dtype=np.uint64)
        table = self.codes[depth]
        pos = np.searchsorted(table, codes)
        pos_c = np.minimum(pos, len(table) - 1) if len(table) else np.zeros_like(pos)
        hit = (len(table) > 0) & (pos < len(table))
        if len(table):
            hit = hit & (table[pos_c] == codes)
        return np.where(hit, pos, -1).astype(np.int64)

    def structure_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for d in range(self.max_depth + 1):
            h.update(self.codes[d].tobytes())
            h.update(np.packbits(self.nonempty[d]).tobytes())
        return h.hexdigest()

    def validate(self):
        """Assert structural invariants; used by tests."""
        assert len(self.codes[0]) == 1 and self.codes[0][0] == 0, "root must exist"
        for d in range(self.max_depth + 1):
            codes = self.codes[d]
            assert np.all(codes[1:] > codes[:-1]), f"codes not sorted/unique at depth {d}"
            if d <= self.full_depth:
                assert len(codes) == 8**d, f"tree not full at depth {d}"
            if d > 0:
                parents = np.unique(codes >> np.uint64(3))
                rows = self.find(d - 1, parents)
                assert np.all(rows >= 0), f"orphan nodes at depth {d}"
                # all-8 allocation: each parent present has exactly 8 children
                counts = np.bincount(
                    np.searchsorted(parents, codes >> np.uint64(3)), minlength=len(parents)
                )
                assert np.all(counts == 8), f"partial child sets at depth {d}"
            if d >= self.full_depth:
                split = self.is_split(d)
                assert not np.any(split & ~self.nonempty[d]), f"empty split node at depth {d}"
        # leaf cells tile the cube: sum of 8^(max_depth - d) per leaf equals 8^max_depth
        ds, _ = self.leaves()
        weights = 8 ** (self.max_depth - ds.astype(np.int64))
        assert weights.sum() == 8**self.max_depth, "leaves do not tile the volume"


def _full_level_codes(depth: int) -> np.ndarray:
    return np.arange(8**depth, dtype=np.uint64)


def octree_from_nonempty(nonempty_codes_per_depth, max_depth: int) -> Octree:
    """Assemble a valid octree from per-depth nonempty code sets.

    Ancestor closure is applied; structure = full region plus all-8 children
    of nonempty nodes below it.
    """
    full_depth = min(4, max_depth)
    ne_sets = [np.asarray(c, dtype=np.uint64) for c in nonempty_codes_per_depth]
    ne_sets += [np.zeros(0, np.uint64)] * (max_depth + 1 - len(ne_sets))
    # ancestor closure on nonemptiness
    for d in range(max_depth, 0, -1):
        if len(ne_sets[d]):
            ne_sets[d - 1] = np.union1d(ne_sets[d - 1], ne_sets[d] >> np.uint64(3))
    codes, flags = [], []
    for d in range(max_depth + 1):
        ne_sets[d] = np.unique(ne_sets[d])
        if d <= full_depth:
            level = _full_level_codes(d)
        else:
            parents = codes[d - 1][flags[d - 1]]
            level = ((parents[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]).ravel()
        flag = np.zeros(len(level), dtype=bool)
        if len(ne_sets[d]):
            pos = np.searchsorted(level, ne_sets[d])
            ok = (pos < len(level)) & (level[np.minimum(pos, len(level) - 1)] == ne_sets[d])
            if not np.all(ok):
                raise OctgenError(f"nonempty node without allocated parent at depth {d}")
            flag[pos] = True
        codes.append(level)
        flags.append(flag)
    return Octree(max_depth=max_depth, codes=codes, nonempty=flags)


def build_from_points(points, max_depth: int) -> Octree:
    """Octree from points in [-1,1]^3: nonempty cells are recursively split.

    Deterministic and order-independent: structure depends only on the set of
    occupied finest-level cells.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("no points given")
    if np.any(np.abs(pts) > 1.0):
        raise OutOfDomain("point coordinates must lie in [-1,1]")
    n = 1 << max_depth
    ijk = np.clip(((pts + 1.0) * 0.5 * n).astype(np.int64), 0, n - 1)
    fine = np.unique(morton_encode(ijk[:, 0], ijk[:, 1], ijk[:, 2], max_depth))
    per_depth = [np.zeros(0, np.uint64)] * max_depth + [fine]
    return octree_from_nonempty(per_depth, max_depth)


def truncate(octree: Octree, depth: int) -> Octree:
    """The same tree cut at ``depth``; deeper structure is discarded."""
    if depth > octree.max_depth:
        raise DepthOverflow(f"cannot truncate to {depth} > max_depth {octree.max_depth}")
    return Octree(
        max_depth=depth,
        codes=[octree.codes[d] for d in range(depth + 1)],
        nonempty=[octree.nonempty[d] for d in range(depth + 1)],
    )


# -- split signals -------------------------------------------------------------


@dataclass
class SplitSignal:
    """Per-node 8-channel child-occupancy signal at one depth.

    values[i, j] refers to child j of the i-th node (code order) at ``depth``;
    clean signals are exactly 0/1, noisy ones live anywhere in R and are
    thresholded at 0.5 on application.
    """

    depth: int
    values: np.ndarray  # (n_nodes_at_depth, 8) float32
    codes: np.ndarray  # node codes, sorted

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.codes = np.asarray(self.codes, dtype=np.uint64)
        if self.values.shape != (len(self.codes), 8):
            raise DepthMismatch(
                f"signal values {self.values.shape} do not match {len(self.codes)} nodes x 8"
            )


def extract_split_signal(octree: Octree, depth: int) -> SplitSignal:
    """Clean 0/1 signal: channel j = 1 iff child j exists and is nonempty."""
    if depth + 1 > octree.max_depth:
        raise DepthOverflow(f"depth {depth}+1 exceeds max_depth {octree.max_depth}")
    n = octree.num_nodes(depth)
    values = np.zeros((n, 8), dtype=np.float32)
    if octree.num_nodes(depth + 1):
        child_flags = octree.nonempty[depth + 1].reshape(-1, 8)
        parents = octree.codes[depth + 1][::8] >> np.uint64(3)
        rows = octree.find(depth, parents)
        values[rows] = child_flags.astype(np.float32)
    return SplitSignal(depth=depth, values=values, codes=octree.codes[depth])


def apply_split_signal(base: Octree, signal: SplitSignal, grow_to: int) -> Octree:
    """Grow ``base`` two levels using a (possibly noisy) split signal.

    Channels >= 0.5 mark nonempty children at depth d+1 under nonempty base
    nodes; every nonempty d+1 node is then fully subdivided into 8 nonempty
    d+2 leaves (the signal does not encode d+2 granularity).
    """
    d = base.finest_populated()
    if signal.depth != d:
        raise DepthMismatch(f"signal depth {signal.depth} != finest populated depth {d}")
    if grow_to != d + 2:
        raise DepthMismatch(f"grow_to must be {d + 2}, got {grow_to}")
    if len(signal.codes) != base.num_nodes(d) or np.any(signal.codes != base.codes[d]):
        raise DepthMismatch("signal nodes do not match base octree nodes")
    hot = signal.values >= 0.5
    parent_ne = base.nonempty[d]
    codes = [base.codes[i] for i in range(d + 1)]
    flags = [base.nonempty[i].copy() for i in range(d + 1)]
    # depth d+1: all 8 children under nonempty parents, occupancy from channels
    parents = base.codes[d][parent_ne]
    level1 = ((parents[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]).ravel()
    flag1 = hot[parent_ne].ravel()
    # depth d+2: full subdivision of nonempty d+1 nodes, all marked nonempty
    hot_nodes = level1[flag1]
    level2 = ((hot_nodes[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]).ravel()
    flag2 = np.ones(len(level2), dtype=bool)
    codes += [level1, level2]
    flags += [flag1, flag2]
    return Octree(max_depth=grow_to, codes=codes, nonempty=flags, full_depth=base.full_depth)


# -- dual graph ------------------------------------------------------------


@dataclass
class DualGraph:
    """Face-adjacency graph over octree leaves (all depths).

    vertices: canonical leaf keys; edges: directed (src, dst, kind) arrays
    including one self edge per vertex; symmetric with mirrored kinds.
    """

    depths: np.ndarray  # (V,) int8
    codes: np.ndarray  # (V,) uint64
    src: np.ndarray  # (E,) int64
    dst: np.ndarray  # (E,) int64
    kind: np.ndarray  # (E,) int8

    @property
    def num_vertices(self):
        return len(self.depths)

    @property
    def num_edges(self):
        return len(self.src)


def dual_graph(octree: Octree) -> DualGraph:
    """Build the leaf adjacency graph, allowing size-varying neighbors."""
    depths, codes = octree.leaves()
    nv = len(codes)
    # leaf lookup tables per depth, mapping code -> global vertex row
    row_of = {}
    offset = 0
    leaf_codes_at = {}
    for d in range(octree.max_depth + 1):
        mask = octree.is_leaf(d)
        cnt = int(mask.sum())
        if cnt:
            leaf_codes_at[d] = octree.codes[d][mask]
            row_of[d] = offset + np.arange(cnt, dtype=np.int64)
            offset += cnt
    src_parts = [np.arange(nv, dtype=np.int64)]
    dst_parts = [np.arange(nv, dtype=np.int64)]
    kind_parts = [np.zeros(nv, dtype=np.int8)]

    for d, leaf_codes in leaf_codes_at.items():
        if d == 0:
            continue
        x, y, z = morton_decode(leaf_codes, d)
        rows_here = row_of[d]
        lim = 1 << d
        for kind, (ox, oy, oz) in _KIND_OFFSET.items():
            nx, ny, nz = x + ox, y + oy, z + oz
            inb = (nx >= 0) & (nx < lim) & (ny >= 0) & (ny < lim) & (nz >= 0) & (nz < lim)
            if not inb.any():
                continue
            ncode = morton_encode(nx[inb], ny[inb], nz[inb], d)
            mine = rows_here[inb]
            unresolved = np.ones(len(ncode), dtype=bool)
            for up in range(d + 1):
                dd = d - up
                if dd not in leaf_codes_at or not unresolved.any():
                    continue
                cand = ncode[unresolved] >> np.uint64(3 * up)
                table = leaf_codes_at[dd]
                pos = np.searchsorted(table, cand)
                ok = pos < len(table)
                ok[ok] = table[pos[ok]] == cand[ok]
                if not ok.any():
                    continue
                sel = np.flatnonzero(unresolved)[ok]
                neigh_rows = row_of[dd][pos[ok]]
                my_rows = mine[sel]
                src_parts.append(my_rows)
                dst_parts.append(neigh_rows)
                kind_parts.append(np.full(len(sel), kind, dtype=np.int8))
                if up > 0:
                    # coarser neighbor never discovers the finer leaf itself
                    src_parts.append(neigh_rows)
                    dst_parts.append(my_rows)
                    kind_parts.append(np.full(len(sel), mirror_kind(kind), dtype=np.int8))
                unresolved[sel] = False
    return DualGraph(
        depths=depths,
        codes=codes,
        src=np.concatenate(src_parts),
        dst=np.concatenate(dst_parts),
        kind=np.concatenate(kind_parts),
    )


# -- point cloud I/O ------------------------------------------------------------

OPC_MAGIC = b"OPC1"


def read_xyz(path):
    """ASCII point cloud: 6 floats per line (position + normal)."""
    arr = np.loadtxt(path, dtype=np.float64).reshape(-1, 6)
    return arr[:, :3], arr[:, 3:]


def write_xyz(path, points, normals):
    arr = np.hstack([np.asarray(points, np.float64), np.asarray(normals, np.float64)])
    np.savetxt(path, arr, fmt="%.8f")


def read_opc1(path):
    """Binary point cloud: magic OPC1, u64 count, then 6 x f32 per point."""
    with open(path, "rb") as f:
        if f.read(4) != OPC_MAGIC:
            raise OctgenError(f"bad magic in {path}")
        count = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        data = np.frombuffer(f.read(24 * count), dtype="<f4").reshape(count, 6)
    return data[:, :3].astype(np.float64), data[:, 3:].astype(np.float64)


def write_opc1(path, points, normals):
    pts = np.asarray(points, np.float64)
    data = np.hstack([pts, np.asarray(normals, np.float64)]).astype("<f4")
    with open(path, "wb") as f:
        f.write(OPC_MAGIC)
        f.write(np.uint64(len(pts)).tobytes())
        f.write(data.tobytes())
