"""Conforming triangle meshes with oriented edges and bisection refinement.

Conventions baked into every downstream module:

* Triangles are counterclockwise and the refinement edge of element t is
  always its local edge 0, i.e. the edge (v0, v1).  Generators rotate the
  vertex triple so that the longest edge sits in slot 0 (ties broken by
  global edge id); bisection children are created already rotated.
* Global edges store the vertex pair (a, b) with a < b.  The unit tangent
  runs from a to b and the unit normal is the tangent rotated clockwise,
  n = (t_y, -t_x).  Whether that normal points out of a particular
  adjacent element is recorded in tri_edge_sign, so trace formulas are
  written against outward normals and never depend on edge storage order.
* edge_tris[e] = (left element, right element), right is -1 on the
  boundary.  For a boundary edge whose unique element lies to the right,
  the element is stored in slot 0 with sign -1.
* Boundary edges carry a single-character condition tag: "C" (clamped),
  "S" (simply supported) or "F" (free).  Interior edges carry "".
"""

import numpy as np

CLAMPED = "C"
SIMPLY_SUPPORTED = "S"
FREE = "F"
_VALID_TAGS = (CLAMPED, SIMPLY_SUPPORTED, FREE)


class BoundarySpec:
    """Assignment of condition tags to boundary edges.

    The classifier receives an edge midpoint (x, y) and returns one of the
    tag characters.  Generators call it once per boundary edge; refinement
    afterwards propagates tags to child edges without re-classifying.
    """

    def __init__(self, classify):
        self._classify = classify

    def tag(self, x, y):
        t = self._classify(x, y)
        if t not in _VALID_TAGS:
            raise ValueError(f"boundary classifier returned {t!r}")
        return t

    @classmethod
    def uniform(cls, tag=CLAMPED):
        if tag not in _VALID_TAGS:
            raise ValueError(f"unknown boundary tag {tag!r}")
        return cls(lambda x, y: tag)

    @classmethod
    def square_sides(cls, left=CLAMPED, right=CLAMPED, bottom=CLAMPED, top=CLAMPED):
        """Per-side tags for meshes of the unit square."""

        def classify(x, y, _tol=1e-9):
            if x < _tol:
                return left
            if x > 1.0 - _tol:
                return right
            if y < _tol:
                return bottom
            if y > 1.0 - _tol:
                return top
            raise ValueError(f"edge midpoint ({x}, {y}) not on the unit-square boundary")

        return cls(classify)


class Mesh:
    """Triangulation with precomputed edge and geometry arrays.

    Parameters
    ----------
    vertices : (nV, 2) float array
    triangles : (nT, 3) int array
        Orientation is normalized to counterclockwise on input.
    boundary_tags : dict, optional
        Maps sorted boundary vertex pairs (a, b) to a tag character.
        Untagged boundary edges default to clamped.
    _keep_rotation : bool
        Internal.  Refinement passes True because children arrive with
        their refinement edge already in slot 0.
    """

    def __init__(self, vertices, triangles, boundary_tags=None, _keep_rotation=False):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        tris = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must have shape (nV, 2)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError("triangles must have shape (nT, 3)")

        v = self.vertices
        cross = self._signed_areas(v, tris)
        if np.any(cross == 0.0):
            raise ValueError("degenerate triangle with zero area")
        flip = cross < 0.0
        if np.any(flip):
            tris = tris.copy()
            tris[flip] = tris[flip][:, [0, 2, 1]]
        self.triangles = tris

        self._build_edges()
        if not _keep_rotation:
            self._rotate_to_refinement_edges()
            self._build_edges()
        self._build_geometry()
        self._apply_tags(boundary_tags or {})

    @staticmethod
    def _signed_areas(v, tris):
        d1 = v[tris[:, 1]] - v[tris[:, 0]]
        d2 = v[tris[:, 2]] - v[tris[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def _build_edges(self):
        tris = self.triangles
        nT = len(tris)
        loc = np.stack([tris, np.roll(tris, -1, axis=1)], axis=2)  # (nT, 3, 2) directed
        directed = loc.reshape(-1, 2)
        ordered = np.sort(directed, axis=1)
        edges, inverse = np.unique(ordered, axis=0, return_inverse=True)
        self.edges = edges
        self.tri_edges = inverse.reshape(nT, 3)
        sign = np.where(directed[:, 0] < directed[:, 1], 1, -1).astype(np.int8)
        self.tri_edge_sign = sign.reshape(nT, 3)

        nE = len(edges)
        counts = np.bincount(self.tri_edges.ravel(), minlength=nE)
        if counts.max(initial=0) > 2:
            raise ValueError("non-manifold edge shared by more than two triangles")
        edge_tris = np.full((nE, 2), -1, dtype=np.int64)
        tids = np.repeat(np.arange(nT), 3)
        eids = self.tri_edges.ravel()
        signs = self.tri_edge_sign.ravel()
        left = signs > 0
        edge_tris[eids[left], 0] = tids[left]
        edge_tris[eids[~left], 1] = tids[~left]
        lone = edge_tris[:, 0] < 0
        edge_tris[lone, 0] = edge_tris[lone, 1]
        edge_tris[lone, 1] = -1
        self.edge_tris = edge_tris
        interior = counts == 2
        if np.any(interior & (np.any(edge_tris < 0, axis=1))):
            raise ValueError("interior edge traversed twice in the same direction")

    def _rotate_to_refinement_edges(self):
        v = self.vertices
        e = self.edges
        length = np.linalg.norm(v[e[:, 1]] - v[e[:, 0]], axis=1)
        # strict total order on edges: length first, edge id as tie break
        key = length[self.tri_edges] + 1e-12 * length.mean() * (
            self.tri_edges / max(len(e), 1))
        slot = np.argmax(key, axis=1)
        tris = self.triangles
        out = tris.copy()
        for s in (1, 2):
            rows = slot == s
            out[rows] = np.roll(tris[rows], -s, axis=1)
        self.triangles = out

    def _build_geometry(self):
        v = self.vertices
        tris = self.triangles
        self.tri_verts = v[tris]
        self.area = self._signed_areas(v, tris)
        self.centroid = self.tri_verts.mean(axis=1)
        side = self.tri_verts - np.roll(self.tri_verts, -1, axis=1)
        self.diam = np.linalg.norm(side, axis=2).max(axis=1)
        vec = v[self.edges[:, 1]] - v[self.edges[:, 0]]
        self.edge_len = np.linalg.norm(vec, axis=1)
        self.edge_tangent = vec / self.edge_len[:, None]
        self.edge_normal = np.stack(
            [self.edge_tangent[:, 1], -self.edge_tangent[:, 0]], axis=1)
        self.edge_mid = 0.5 * (v[self.edges[:, 0]] + v[self.edges[:, 1]])

    def _apply_tags(self, boundary_tags):
        nE = len(self.edges)
        tag = np.full(nE, "", dtype="<U1")
        bnd = self.edge_tris[:, 1] < 0
        tag[bnd] = CLAMPED
        pair_to_eid = {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}
        for pair, t in boundary_tags.items():
            a, b = sorted(map(int, pair))
            eid = pair_to_eid.get((a, b))
            if eid is None:
                raise ValueError(f"boundary tag for unknown edge {(a, b)}")
            if not bnd[eid]:
                raise ValueError(f"tag {t!r} assigned to interior edge {(a, b)}")
            if t not in _VALID_TAGS:
                raise ValueError(f"unknown boundary tag {t!r}")
            tag[eid] = t
        self.edge_tag = tag

    # ------------------------------------------------------------------
    # queries

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    def is_boundary_edge(self):
        return self.edge_tris[:, 1] < 0

    def edges_with_tag(self, tags):
        """Ids of edges whose tag is in the given collection ('' = interior)."""
        mask = np.isin(self.edge_tag, list(tags))
        return np.nonzero(mask)[0]

    def vertices_on_tags(self, tags):
        """Boolean mask of vertices incident to an edge with one of the tags."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        eids = self.edges_with_tag(tags)
        mask[self.edges[eids].ravel()] = True
        return mask

    def boundary_tags_dict(self):
        return {
            (int(a), int(b)): str(t)
            for (a, b), t in zip(self.edges, self.edge_tag)
            if t
        }

    def retagged(self, boundary):
        """Copy of the mesh with boundary tags reassigned by a BoundarySpec."""
        tags = {}
        for eid in np.nonzero(self.is_boundary_edge())[0]:
            a, b = self.edges[eid]
            mx, my = self.edge_mid[eid]
            tags[(int(a), int(b))] = boundary.tag(mx, my)
        return Mesh(self.vertices, self.triangles, tags, _keep_rotation=True)

    def check(self):
        """Raise AssertionError if a structural invariant is violated."""
        assert np.all(self.area > 0.0), "orientation"
        counts = np.bincount(self.tri_edges.ravel(), minlength=self.n_edges)
        assert set(np.unique(counts)) <= {1, 2}, "conformity"
        bnd = self.is_boundary_edge()
        assert np.array_equal(bnd, counts == 1), "edge_tris vs counts"
        assert np.all(self.edge_tag[bnd] != ""), "untagged boundary edge"
        assert np.all(self.edge_tag[~bnd] == ""), "tagged interior edge"
        # outward signs: exactly one left element per interior edge
        for eid in np.nonzero(~bnd)[0][:50]:
            t1, t2 = self.edge_tris[eid]
            s1 = self.tri_edge_sign[t1][self.tri_edges[t1] == eid]
            s2 = self.tri_edge_sign[t2][self.tri_edges[t2] == eid]
            assert s1.item() == 1 and s2.item() == -1, "edge orientation"
        return True


# ----------------------------------------------------------------------
# generators


def make_square_mesh(n, boundary=None):
    """Structured mesh of the unit square with 2*n*n triangles.

    Each of the n-by-n cells is split along the diagonal of positive
    slope.  Vertices are numbered row by row from the origin.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if boundary is None:
        boundary = BoundarySpec.uniform(CLAMPED)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return _tag_and_build(verts, np.array(tris), boundary)


def make_lshape_mesh(n, boundary=None):
    """Structured mesh of (-1,1)^2 minus the closed quadrant [0,1]x[-1,0].

    n is the number of cells per half side, so the mesh has 6*n*n
    triangles.  The re-entrant corner sits at the origin and is always a
    mesh vertex.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if boundary is None:
        boundary = BoundarySpec.uniform(CLAMPED)
    m = 2 * n
    xs = np.linspace(-1.0, 1.0, m + 1)
    ids = -np.ones((m + 1, m + 1), dtype=int)
    verts = []
    for j in range(m + 1):
        for i in range(m + 1):
            x, y = xs[i], xs[j]
            if x > 0.0 and y < 0.0:
                continue
            ids[j, i] = len(verts)
            verts.append((x, y))
    tris = []
    for j in range(m):
        for i in range(m):
            if xs[i] >= 0.0 and xs[j + 1] <= 0.0:
                continue
            v00, v10 = ids[j, i], ids[j, i + 1]
            v01, v11 = ids[j + 1, i], ids[j + 1, i + 1]
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return _tag_and_build(np.array(verts, dtype=float), np.array(tris), boundary)


def _tag_and_build(verts, tris, boundary):
    probe = Mesh(verts, tris)
    tags = {}
    for eid in np.nonzero(probe.is_boundary_edge())[0]:
        a, b = probe.edges[eid]
        mx, my = probe.edge_mid[eid]
        tags[(int(a), int(b))] = boundary.tag(mx, my)
    return Mesh(verts, tris, tags)


# ----------------------------------------------------------------------
# refinement


def refine(mesh, marked):
    """Bisect the marked elements, with closure to keep the mesh conforming.

    Every marked element is bisected at its refinement edge; neighbors are
    bisected as needed (newest-vertex rule) so that no hanging vertices
    remain.  Returns the refined mesh and an integer array mapping each
    new element to the input element it descends from (surviving elements
    map to themselves).
    """
    marked = np.unique(np.asarray(marked, dtype=int))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_triangles):
        raise ValueError("marked element id out of range")
    if marked.size == 0:
        copy = Mesh(mesh.vertices, mesh.triangles,
                    mesh.boundary_tags_dict(), _keep_rotation=True)
        return copy, np.arange(mesh.n_triangles)

    verts = [tuple(p) for p in mesh.vertices]
    tris = {t: tuple(map(int, mesh.triangles[t])) for t in range(mesh.n_triangles)}
    origin = {t: t for t in range(mesh.n_triangles)}
    tags = mesh.boundary_tags_dict()
    next_tid = mesh.n_triangles

    edge2tris = {}
    for t, (a, b, c) in tris.items():
        for pair in ((a, b), (b, c), (c, a)):
            edge2tris.setdefault(_sorted_pair(*pair), []).append(t)

    midpoint = {}

    def get_midpoint(a, b):
        key = _sorted_pair(a, b)
        mid = midpoint.get(key)
        if mid is None:
            pa, pb = verts[a], verts[b]
            verts.append(((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0))
            mid = len(verts) - 1
            midpoint[key] = mid
            tag = tags.pop(key, None)
            if tag is not None:
                tags[_sorted_pair(a, mid)] = tag
                tags[_sorted_pair(mid, b)] = tag
        return mid

    def split(t):
        nonlocal next_tid
        v0, v1, v2 = tris.pop(t)
        for pair in ((v0, v1), (v1, v2), (v2, v0)):
            edge2tris[_sorted_pair(*pair)].remove(t)
        m = get_midpoint(v0, v1)
        for child in ((v2, v0, m), (v1, v2, m)):
            tid = next_tid
            next_tid += 1
            tris[tid] = child
            origin[tid] = origin[t]
            a, b, c = child
            for pair in ((a, b), (b, c), (c, a)):
                edge2tris.setdefault(_sorted_pair(*pair), []).append(tid)

    guard_limit = 64 * (mesh.n_triangles + marked.size + 16)

    def ensure_split(t0):
        stack = [t0]
        guard = 0
        while stack:
            guard += 1
            if guard > guard_limit + 64 * len(tris):
                raise RuntimeError("bisection closure failed to terminate")
            t = stack[-1]
            if t not in tris:
                stack.pop()
                continue
            v0, v1, _ = tris[t]
            ref = _sorted_pair(v0, v1)
            nbs = [s for s in edge2tris[ref] if s != t]
            if not nbs:
                split(t)
                stack.pop()
                continue
            nb = nbs[0]
            w0, w1, _ = tris[nb]
            if _sorted_pair(w0, w1) == ref:
                split(t)
                split(nb)
                stack.pop()
            else:
                stack.append(nb)

    for t in marked:
        if int(t) in tris:
            ensure_split(int(t))

    alive = sorted(tris)
    new_tris = np.array([tris[t] for t in alive], dtype=np.int64)
    parent = np.array([origin[t] for t in alive], dtype=np.int64)
    out = Mesh(np.array(verts), new_tris, tags, _keep_rotation=True)
    return out, parent


def _sorted_pair(a, b):
    return (a, b) if a < b else (b, a)


# ----------------------------------------------------------------------
# text format


def write_mesh(mesh, path):
    """Write a mesh in the plain text exchange format.

    The format has three sections: VERTICES (coordinates), TRIANGLES
    (vertex triples) and BOUNDARY (tagged vertex pairs).  Lines starting
    with '#' are comments.
    """
    lines = ["# platebend mesh"]
    lines.append(f"VERTICES {mesh.n_vertices}")
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    lines.append(f"TRIANGLES {mesh.n_triangles}")
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c}")
    tagged = mesh.boundary_tags_dict()
    lines.append(f"BOUNDARY {len(tagged)}")
    for (a, b), t in sorted(tagged.items()):
        lines.append(f"{a} {b} {t}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    """Read a mesh written by write_mesh (or by hand in the same format)."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    tokens = [ln for ln in raw if ln and not ln.startswith("#")]
    pos = 0

    def expect_header(name):
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError(f"missing {name} section")
        parts = tokens[pos].split()
        if len(parts) != 2 or parts[0] != name:
            raise ValueError(f"expected '{name} <count>', got {tokens[pos]!r}")
        pos += 1
        return int(parts[1])

    nv = expect_header("VERTICES")
    verts = np.array([[float(w) for w in tokens[pos + i].split()] for i in range(nv)])
    pos += nv
    nt = expect_header("TRIANGLES")
    tris = np.array([[int(w) for w in tokens[pos + i].split()] for i in range(nt)],
                    dtype=np.int64)
    pos += nt
    nb = expect_header("BOUNDARY")
    tags = {}
    for i in range(nb):
        a, b, t = tokens[pos + i].split()
        tags[_sorted_pair(int(a), int(b))] = t
    return Mesh(verts, tris, tags)
