"""Gmsh MSH 2.2 ASCII reader and writer for simplicial meshes.

Supports nodes plus element types 2 (triangle) and 4 (tetrahedron) as
cells.  Elements one dimension below the cells become boundary facets with
their physical tag as marker; point elements are skipped.  Round-tripping
a mesh preserves vertices (to 1e-12), cells and markers.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from .mesh import SimplexMesh

_NODES_PER_TYPE = {1: 2, 2: 3, 4: 4, 15: 1}


class MshParseError(ValueError):
    """Malformed or unsupported MSH content."""


def _tokenize(path) -> List[List[str]]:
    with open(path, "r") as fh:
        return [line.split() for line in fh]


def read_msh(path) -> SimplexMesh:
    """Read an MSH 2.2 ASCII file into a :class:`SimplexMesh`."""
    lines = _tokenize(path)
    sections = {}
    i = 0
    while i < len(lines):
        tokens = lines[i]
        if tokens and tokens[0].startswith("$") and not tokens[0].startswith("$End"):
            name = tokens[0][1:]
            end = f"$End{name}"
            j = i + 1
            while j < len(lines) and (not lines[j] or lines[j][0] != end):
                j += 1
            if j == len(lines):
                raise MshParseError(f"section ${name} is missing its {end} terminator")
            sections[name] = lines[i + 1:j]
            i = j + 1
        else:
            i += 1

    if "MeshFormat" not in sections:
        raise MshParseError("missing $MeshFormat section")
    fmt = sections["MeshFormat"][0]
    if not fmt or not fmt[0].startswith("2."):
        raise MshParseError(f"unsupported MSH version {fmt[0] if fmt else '?'}; expected 2.x")
    if "Nodes" not in sections:
        raise MshParseError("missing $Nodes section")
    if "Elements" not in sections:
        raise MshParseError("missing $Elements section")

    node_lines = sections["Nodes"]
    try:
        n_nodes = int(node_lines[0][0])
    except (IndexError, ValueError) as err:
        raise MshParseError("malformed node count in $Nodes") from err
    if len(node_lines) - 1 != n_nodes:
        raise MshParseError(f"$Nodes declares {n_nodes} nodes but contains {len(node_lines) - 1}")
    ids = np.empty(n_nodes, dtype=np.int64)
    coords = np.empty((n_nodes, 3))
    for k, tokens in enumerate(node_lines[1:]):
        if len(tokens) != 4:
            raise MshParseError(f"malformed node line {k + 1} in $Nodes")
        ids[k] = int(tokens[0])
        coords[k] = [float(t) for t in tokens[1:]]
    order = np.argsort(ids)
    ids, coords = ids[order], coords[order]
    if not np.array_equal(ids, np.arange(1, n_nodes + 1)):
        raise MshParseError("node ids must be contiguous 1..N with no gaps")

    elem_lines = sections["Elements"]
    try:
        n_elems = int(elem_lines[0][0])
    except (IndexError, ValueError) as err:
        raise MshParseError("malformed element count in $Elements") from err
    if len(elem_lines) - 1 != n_elems:
        raise MshParseError(f"$Elements declares {n_elems} elements but contains {len(elem_lines) - 1}")

    by_type = {1: [], 2: [], 4: []}
    tags_by_type = {1: [], 2: [], 4: []}
    for k, tokens in enumerate(elem_lines[1:]):
        if len(tokens) < 3:
            raise MshParseError(f"malformed element line {k + 1} in $Elements")
        etype = int(tokens[1])
        if etype not in _NODES_PER_TYPE:
            raise MshParseError(f"unsupported element type {etype} on element line {k + 1}")
        ntags = int(tokens[2])
        nn = _NODES_PER_TYPE[etype]
        nodes = [int(t) for t in tokens[3 + ntags:3 + ntags + nn]]
        if len(nodes) != nn:
            raise MshParseError(f"element line {k + 1} has too few node ids for type {etype}")
        if any(nid < 1 or nid > n_nodes for nid in nodes):
            raise MshParseError(f"element line {k + 1} references an unknown node id")
        if etype == 15:
            continue
        by_type[etype].append([nid - 1 for nid in nodes])
        tags_by_type[etype].append(int(tokens[3]) if ntags >= 1 else 0)

    if by_type[4]:
        dim, cell_type, facet_type = 3, 4, 2
    elif by_type[2]:
        dim, cell_type, facet_type = 2, 2, 1
    else:
        raise MshParseError("file contains no triangle or tetrahedron cells")

    vertices = coords[:, :dim]
    if dim == 2 and np.abs(coords[:, 2]).max(initial=0.0) > 1e-12:
        raise MshParseError("triangle mesh has non-zero z coordinates")

    cells = np.asarray(by_type[cell_type], dtype=np.int64)
    facets = np.asarray(by_type[facet_type], dtype=np.int64).reshape(-1, dim)
    markers = np.asarray(tags_by_type[facet_type], dtype=np.int64)
    return SimplexMesh(dim, vertices, cells, facets, markers)


def write_msh(mesh: SimplexMesh, path) -> None:
    """Write a :class:`SimplexMesh` as an MSH 2.2 ASCII file."""
    path = Path(path)
    cell_type = 2 if mesh.dim == 2 else 4
    facet_type = 1 if mesh.dim == 2 else 2
    with open(path, "w") as fh:
        fh.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        fh.write(f"$Nodes\n{mesh.n_vertices}\n")
        for i, v in enumerate(mesh.vertices, start=1):
            coords = list(v) + [0.0] * (3 - mesh.dim)
            fh.write(f"{i} " + " ".join(f"{c:.17g}" for c in coords) + "\n")
        fh.write("$EndNodes\n")
        n_elems = len(mesh.boundary_facets) + mesh.n_cells
        fh.write(f"$Elements\n{n_elems}\n")
        eid = 1
        for facet, marker in zip(mesh.boundary_facets, mesh.facet_markers):
            nodes = " ".join(str(int(n) + 1) for n in facet)
            fh.write(f"{eid} {facet_type} 2 {int(marker)} {int(marker)} {nodes}\n")
            eid += 1
        for cell in mesh.cells:
            nodes = " ".join(str(int(n) + 1) for n in cell)
            fh.write(f"{eid} {cell_type} 2 0 0 {nodes}\n")
            eid += 1
        fh.write("$EndElements\n")
