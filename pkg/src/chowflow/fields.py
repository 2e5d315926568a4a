"""Fixed vector fields, Lie brackets, and bracket-generating rank certificates.

The fields used here are affine, V(x) = x @ M + c, which makes brackets exact:
for X = (A, a) and Y = (B, b),

    [X, Y](x) = J_Y X(x) - J_X Y(x) = x @ (AB - BA) + (a @ B - b @ A),

again affine. Iterated brackets therefore never need numerical promotion.
The chain field pairs the first coordinate direction with a shift structure
(component j feeds on coordinate j-1), so two fields bracket-generate the
whole space in any dimension d >= 3. Every constructor here produces
divergence-free fields: no component depends on its own coordinate.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .diffcore import ContractError


class UnsupportedFieldError(ContractError):
    """A bracket would require promoting a non-affine intermediate."""


class FixedField:
    """A smooth vector field with analytic Jacobian action and divergence.

    Affine fields carry (linear, offset) and derive everything from them.
    General fields may be built from callables but cannot enter iterated
    brackets.
    """

    def __init__(self, dim: int, tag: str, linear: np.ndarray | None = None,
                 offset: np.ndarray | None = None,
                 eval_fn: Callable | None = None,
                 jac_fn: Callable | None = None,
                 div_fn: Callable | None = None):
        self.dim = dim
        self.tag = tag
        if linear is not None or offset is not None:
            self.linear = np.zeros((dim, dim)) if linear is None else np.asarray(linear, float)
            self.offset = np.zeros(dim) if offset is None else np.asarray(offset, float)
            if self.linear.shape != (dim, dim) or self.offset.shape != (dim,):
                raise ContractError("affine field data has wrong shape")
            self._eval_fn = self._jac_fn = self._div_fn = None
        else:
            if not (eval_fn and jac_fn and div_fn):
                raise ContractError("general field needs eval, jacobian and divergence")
            self.linear = None
            self.offset = None
            self._eval_fn, self._jac_fn, self._div_fn = eval_fn, jac_fn, div_fn

    @property
    def is_affine(self) -> bool:
        return self.linear is not None

    @property
    def div_const(self) -> float:
        """Divergence of an affine field (trace of the linear part)."""
        if not self.is_affine:
            raise UnsupportedFieldError(f"field '{self.tag}' is not affine")
        return float(np.trace(self.linear))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        if x.shape[-1] != self.dim:
            raise ContractError(f"point dim {x.shape[-1]} != field dim {self.dim}")
        if self.is_affine:
            return x @ self.linear + self.offset
        return self._eval_fn(x)

    def jacobian_action(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """J_V(x) @ w, linear in w."""
        x = np.asarray(x, float)
        w = np.asarray(w, float)
        if self.is_affine:
            return w @ self.linear
        return self._jac_fn(x, w)

    def divergence(self, x: np.ndarray):
        x = np.asarray(x, float)
        if self.is_affine:
            tr = self.div_const
            return tr if x.ndim == 1 else np.full(x.shape[0], tr)
        return self._div_fn(x)

    def __repr__(self):
        return f"FixedField({self.tag}, dim={self.dim})"


class FieldSet:
    """An ordered set of k fields of equal dimension, 2 <= k <= d."""

    def __init__(self, fields: Sequence[FixedField]):
        fields = list(fields)
        if not fields:
            raise ContractError("FieldSet needs at least one field")
        dim = fields[0].dim
        if any(f.dim != dim for f in fields):
            raise ContractError("all fields in a set must share one dimension")
        if not 2 <= len(fields) <= dim:
            raise ContractError(
                f"need 2 <= k <= d, got k={len(fields)} in dimension {dim}"
            )
        self.fields = fields
        self.dim = dim

    def __len__(self):
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, i):
        return self.fields[i]


# ---------------------------------------------------------------------------
# constructors


def chain_field(d: int) -> FixedField:
    """V(x) = (1, 0, x_2, x_3, ..., x_{d-1}): the first chain generator."""
    if d < 3:
        raise ContractError(f"chain field needs d >= 3, got {d}")
    linear = np.zeros((d, d))
    for j in range(2, d):
        linear[j - 1, j] = 1.0
    offset = np.zeros(d)
    offset[0] = 1.0
    return FixedField(d, "chain", linear=linear, offset=offset)


def coordinate_field(i: int, d: int) -> FixedField:
    """The constant field e_i (1-based index)."""
    if not 1 <= i <= d:
        raise ContractError(f"coordinate index {i} out of range 1..{d}")
    offset = np.zeros(d)
    offset[i - 1] = 1.0
    return FixedField(d, f"e{i}", linear=np.zeros((d, d)), offset=offset)


def chain_pair(d: int) -> FieldSet:
    """The bracket-generating pair (chain field, e_2)."""
    return FieldSet([chain_field(d), coordinate_field(2, d)])


def coordinate_set(k: int, d: int) -> FieldSet:
    """The first k coordinate fields (the plain CNF parameterization at k=d)."""
    return FieldSet([coordinate_field(i, d) for i in range(1, k + 1)])


def heisenberg_set() -> FieldSet:
    """The standard horizontal generating pair on R^3."""
    v1 = coordinate_field(1, 3)
    v1.tag = "heis1"
    linear = np.zeros((3, 3))
    linear[0, 2] = 1.0
    offset = np.zeros(3)
    offset[1] = 1.0
    v2 = FixedField(3, "heis2", linear=linear, offset=offset)
    return FieldSet([v1, v2])


def permuted_chain_pair(d: int, perm: Sequence[int]) -> FieldSet:
    """Chain pair under a coordinate permutation (1-based indices i_1..i_d)."""
    perm = list(perm)
    if sorted(perm) != list(range(1, d + 1)):
        raise ContractError(f"{perm} is not a permutation of 1..{d}")
    if d < 3:
        raise ContractError("permuted chain needs d >= 3")
    linear = np.zeros((d, d))
    for j in range(1, d - 1):  # x_{i_{j+1}} feeds component i_{j+2}
        linear[perm[j] - 1, perm[j + 1] - 1] = 1.0
    offset = np.zeros(d)
    offset[perm[0] - 1] = 1.0
    v1 = FixedField(d, f"chain-perm", linear=linear, offset=offset)
    v2 = coordinate_field(perm[1], d)
    return FieldSet([v1, v2])


# ---------------------------------------------------------------------------
# brackets


FIELD_SET_NAMES = ("chain-pair", "coordinate", "heisenberg", "permuted-chain")


def named_field_set(name: str, d: int, k: int,
                    permutation: Sequence[int] | None = None) -> FieldSet:
    """Build one of the named field-set configurations.

    chain-pair and permuted-chain fix k = 2; heisenberg fixes d = 3, k = 2;
    coordinate uses the first k coordinate directions.
    """
    if name == "chain-pair":
        if k != 2:
            raise ContractError("chain-pair uses exactly k = 2 fields")
        return chain_pair(d)
    if name == "coordinate":
        return coordinate_set(k, d)
    if name == "heisenberg":
        if d != 3 or k != 2:
            raise ContractError("heisenberg set lives in d = 3 with k = 2")
        return heisenberg_set()
    if name == "permuted-chain":
        if k != 2:
            raise ContractError("permuted-chain uses exactly k = 2 fields")
        if permutation is None:
            raise ContractError("permuted-chain needs a permutation")
        return permuted_chain_pair(d, permutation)
    raise ContractError(
        f"unknown field set '{name}' (known: {', '.join(FIELD_SET_NAMES)})"
    )


def lie_bracket(x_field: FixedField, y_field: FixedField, x: np.ndarray) -> np.ndarray:
    """[X, Y](x) = J_Y(x) X(x) - J_X(x) Y(x)."""
    if x_field.dim != y_field.dim:
        raise ContractError("bracket fields must share a dimension")
    return y_field.jacobian_action(x, x_field(x)) - x_field.jacobian_action(x, y_field(x))


def bracket_field(x_field: FixedField, y_field: FixedField) -> FixedField:
    """[X, Y] as a field; exact for affine inputs, rejected otherwise."""
    if x_field.dim != y_field.dim:
        raise ContractError("bracket fields must share a dimension")
    if not (x_field.is_affine and y_field.is_affine):
        raise UnsupportedFieldError(
            f"cannot promote bracket of non-affine fields "
            f"('{x_field.tag}', '{y_field.tag}')"
        )
    a_lin, a_off = x_field.linear, x_field.offset
    b_lin, b_off = y_field.linear, y_field.offset
    return FixedField(
        x_field.dim,
        f"[{x_field.tag},{y_field.tag}]",
        linear=a_lin @ b_lin - b_lin @ a_lin,
        offset=a_off @ b_lin - b_off @ a_lin,
    )


def iterated_ad(x_field: FixedField, y_field: FixedField, m: int, x: np.ndarray) -> np.ndarray:
    """ad_X^m(Y)(x): the m-fold nested bracket [X, [X, ... [X, Y]]] at x."""
    if m < 1:
        raise ContractError(f"iterated_ad order must be >= 1, got {m}")
    current = y_field
    for _ in range(m):
        current = bracket_field(x_field, current)
    return current(x)


def _bracket_closure(fields: Sequence[FixedField], depth: int) -> list[FixedField]:
    """Fields plus all right-normed brackets [g, [g', ...]] up to the depth."""
    generators = list(fields)
    closure = list(generators)
    level = list(generators)
    for _ in range(depth):
        level = [bracket_field(g, f) for g in generators for f in level]
        closure.extend(level)
    return closure


def bracket_generating_rank(fields, x: np.ndarray, depth: int,
                            tol: float = 1e-8) -> int:
    """Numerical rank at x of all field values and brackets up to `depth`."""
    if depth < 0:
        raise ContractError("depth must be >= 0")
    closure = _bracket_closure(list(fields), depth)
    columns = np.stack([f(np.asarray(x, float)) for f in closure], axis=-1)
    singular = np.linalg.svd(columns, compute_uv=False)
    return int((singular > tol).sum())


def rank_certificate(fields, points: np.ndarray, depth: int,
                     tol: float = 1e-8) -> np.ndarray:
    """Ranks at many points, sharing one bracket closure."""
    closure = _bracket_closure(list(fields), depth)
    points = np.atleast_2d(np.asarray(points, float))
    columns = np.stack([f(points) for f in closure], axis=-1)  # (n, d, ncols)
    singular = np.linalg.svd(columns, compute_uv=False)
    return (singular > tol).sum(axis=-1).astype(int)
