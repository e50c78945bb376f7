"""Coefficient matrices for FIMEX-Radau propagators and the shared iterator.

A propagator advances a block of ``q`` values by ``h = 2r``::

    y_new = A y + r B1 f1(y_new) + r B2 f2(y)

and the iterator re-solves the current block in place::

    y_new = A_tilde y + r B_it (f1(y_new) + f2(y))

``B1`` integrates the interpolant of the implicit derivatives at output nodes
2..q.  ``B2`` integrates the explicit derivatives at input nodes 2..q
(``RADAU``) or 1..q (``RADAU_STAR``).
"""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass

import numpy as np

from .nodes import NodeSet, quad_weights, radau_nodes

_MATRIX_NAMES = ("A", "B1", "B2", "A_tilde", "B_it")


class Variant(enum.Enum):
    RADAU = "radau"
    RADAU_STAR = "radau-star"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-").replace("*", "-star")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown variant {value!r}; expected 'radau' or 'radau-star'")


@dataclass(frozen=True, eq=False)
class MethodTableau:
    """Propagator and iterator coefficients for one ``(q, variant)`` pair."""

    q: int
    variant: Variant
    nodes: NodeSet
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    A_tilde: np.ndarray
    B_it: np.ndarray

    def __post_init__(self):
        for name in _MATRIX_NAMES:
            getattr(self, name).setflags(write=False)

    @property
    def z(self) -> np.ndarray:
        return self.nodes.z

    @property
    def name(self) -> str:
        tag = "Radau*" if self.variant is Variant.RADAU_STAR else "Radau"
        return f"FIMEX-{tag}({self.q})"

    def order(self, kappa: int) -> int:
        """Nominal order of the composite method with ``kappa`` iterator sweeps."""
        base = self.q if self.variant is Variant.RADAU_STAR else self.q - 1
        return min(2 * self.q - 3, base + kappa)

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _MATRIX_NAMES}


def _implicit_weights(z: np.ndarray) -> np.ndarray:
    q = z.size
    B = np.zeros((q, q))
    # int_1^{z_i+2} of the basis on z+2 equals int_{-1}^{z_i} of the basis on z
    B[:, 1:] = quad_weights(z[1:], z[0], z)
    return B


def build_iterator(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A_tilde, B_it)`` for the ``q``-node iterator."""
    z = radau_nodes(q).z
    A_tilde = np.zeros((q, q))
    A_tilde[:, 0] = 1.0
    return A_tilde, _implicit_weights(z)


def build_propagator(q: int, variant=Variant.RADAU) -> MethodTableau:
    """Build the full FIMEX-Radau / FIMEX-Radau* tableau for ``q`` nodes."""
    variant = Variant.parse(variant)
    nodes = radau_nodes(q)
    z = nodes.z
    A = np.zeros((q, q))
    A[:, -1] = 1.0
    B1 = _implicit_weights(z)
    if variant is Variant.RADAU_STAR:
        B2 = quad_weights(z, z[-1], z + 2.0)
    else:
        B2 = np.zeros((q, q))
        B2[:, 1:] = quad_weights(z[1:], z[-1], z + 2.0)
    A_tilde, B_it = build_iterator(q)
    return MethodTableau(q=q, variant=variant, nodes=nodes, A=A, B1=B1, B2=B2,
                         A_tilde=A_tilde, B_it=B_it)


@dataclass(frozen=True, eq=False)
class GlmEmbedding:
    """Propagator recast as an IMEX general linear method.

    The GLM input is the augmented vector ``(y, r f1, r f2)`` of length
    ``3q``, derivatives pre-scaled by the node radius ``r``; stages are the
    ``q`` propagator outputs::

        Y       = U  y_aug + r A1 f1(Y) + r A2 f2(Y)
        y_aug'  = V  y_aug + r Bg1 f1(Y) + r Bg2 f2(Y)
    """

    U: np.ndarray
    V: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    Bg1: np.ndarray
    Bg2: np.ndarray


def to_glm(t: MethodTableau) -> GlmEmbedding:
    """Assemble the GLM block matrices for a propagator tableau.

    In the generic block form ``y' = A y + r sum_k (Bk f_k(in) + Ck f_k(out))``
    the propagator has ``B^{1} = 0``, ``B^{2} = B2``, ``C^{1} = B1`` and
    ``C^{2} = 0``; those four blocks fill ``U``, ``V``, ``A1``, ``A2`` and
    the identity rows of ``Bg1``/``Bg2`` carry the new derivatives forward.
    """
    q = t.q
    Z = np.zeros((q, q))
    I = np.eye(q)
    U = np.hstack([t.A, Z, t.B2])
    V = np.vstack([U, np.zeros((2 * q, 3 * q))])
    Bg1 = np.vstack([t.B1, I, Z])
    Bg2 = np.vstack([Z, Z, I])
    return GlmEmbedding(U=U, V=V, A1=t.B1.copy(), A2=Z.copy(), Bg1=Bg1, Bg2=Bg2)


def export_coeffs(t: MethodTableau, format: str = "json") -> str:
    """Serialize every coefficient matrix with 17 significant digits."""
    if format == "json":
        payload = {
            "q": t.q,
            "variant": t.variant.value,
            "z": [float(v) for v in t.z],
            **{name: m.tolist() for name, m in t.matrices().items()},
        }
        # repr of a Python float round-trips exactly
        return json.dumps(payload, indent=1) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["matrix", "row", "col", "value"])
        for j, v in enumerate(t.z):
            writer.writerow(["z", 0, j, f"{v:.17g}"])
        for name, m in t.matrices().items():
            for (i, j), v in np.ndenumerate(m):
                writer.writerow([name, i, j, f"{v:.17g}"])
        return buf.getvalue()
    raise ValueError(f"unknown export format {format!r}")


def import_coeffs(text: str, format: str = "json") -> dict:
    """Parse the output of :func:`export_coeffs` back into arrays."""
    if format == "json":
        raw = json.loads(text)
        out = {"q": raw["q"], "variant": Variant.parse(raw["variant"]), "z": np.array(raw["z"])}
        out.update({name: np.array(raw[name], dtype=float) for name in _MATRIX_NAMES})
        return out
    if format == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        q = 1 + max(int(r["col"]) for r in rows if r["matrix"] == "z")
        out = {"q": q, "z": np.zeros(q)}
        out.update({name: np.zeros((q, q)) for name in _MATRIX_NAMES})
        for r in rows:
            if r["matrix"] == "z":
                out["z"][int(r["col"])] = float(r["value"])
            else:
                out[r["matrix"]][int(r["row"]), int(r["col"])] = float(r["value"])
        return out
    raise ValueError(f"unknown export format {format!r}")
