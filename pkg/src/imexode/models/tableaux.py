"""Runge-Kutta coefficient tables: IMEX pairs and explicit baselines.

Coefficients of the additive schemes are stored as the printed integer
quotients and divided at load time. Explicit baselines are stored as pairs
whose implicit half repeats the explicit table, so the IMEX machinery applies
to them unchanged.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from math import sqrt
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..utils.errors import UnknownSchemeError


class SchemeId(str, Enum):
    """Time stepping schemes known to the integrator."""

    IMEX_RK2 = "imex-rk2"
    IMEX_RK3 = "imex-rk3"
    IMEX_RK4 = "imex-rk4"
    IMEX_RK5 = "imex-rk5"
    ERK4 = "erk4"
    DOPRI5_FIXED = "dopri5"
    CRANK_NICOLSON = "crank-nicolson"
    EULER = "euler"

    @classmethod
    def parse(cls, name: str) -> "SchemeId":
        """Resolve a CLI spelling (``imex-rk3``, ``IMEX_RK3``, ``rk4``) to an id."""
        key = name.strip().lower().replace("_", "-")
        aliases = {"rk4": "erk4", "dopri5-fixed": "dopri5", "cn": "crank-nicolson"}
        key = aliases.get(key, key)
        for scheme in cls:
            if scheme.value == key:
                return scheme
        raise UnknownSchemeError(f"Unknown scheme '{name}' (expected one of {[s.value for s in cls]})")

    @property
    def is_imex(self) -> bool:
        return self in IMEX_SCHEMES

    @property
    def is_explicit(self) -> bool:
        return self in (SchemeId.ERK4, SchemeId.DOPRI5_FIXED, SchemeId.EULER)


IMEX_SCHEMES = (SchemeId.IMEX_RK2, SchemeId.IMEX_RK3, SchemeId.IMEX_RK4, SchemeId.IMEX_RK5)


@dataclass(frozen=True)
class ButcherTableauPair:
    """Explicit (A, b, c) and implicit (At, bt, ct) coefficient tables of one scheme."""

    name: str
    A: np.ndarray
    b: np.ndarray
    At: np.ndarray
    bt: np.ndarray
    order: int
    c: np.ndarray = field(init=False)
    ct: np.ndarray = field(init=False)

    def __post_init__(self):
        for attr in ("A", "b", "At", "bt"):
            arr = np.array(getattr(self, attr), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        s = self.b.size
        if self.A.shape != (s, s) or self.At.shape != (s, s) or self.bt.shape != (s,):
            raise ValueError(f"Tableau '{self.name}': inconsistent shapes for s={s}")
        c = self.A.sum(axis=1)
        ct = self.At.sum(axis=1)
        c.setflags(write=False)
        ct.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "ct", ct)

    @property
    def s(self) -> int:
        return self.b.size

    @property
    def implicit_diagonal(self) -> np.ndarray:
        return np.diag(self.At)

    def structural_violations(self, tol: float = 1e-12) -> List[str]:
        """Names of violated structural invariants; empty when the pair is well formed."""
        problems = []
        if np.any(np.triu(self.A) != 0.0):
            problems.append("A not strictly lower triangular")
        if np.any(np.triu(self.At, k=1) != 0.0):
            problems.append("At not lower triangular")
        if abs(self.b.sum() - 1.0) > tol:
            problems.append("sum(b) != 1")
        if abs(self.bt.sum() - 1.0) > tol:
            problems.append("sum(bt) != 1")
        if self.order >= 2:
            if abs(self.b @ self.c - 0.5) > tol:
                problems.append("b.c != 1/2")
            if abs(self.bt @ self.ct - 0.5) > tol:
                problems.append("bt.ct != 1/2")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.At))):
            problems.append("non-finite coefficients")
        return problems


@dataclass(frozen=True)
class OrderCondition:
    """One checked order condition and its residual."""

    name: str
    part: str
    order: int
    value: float
    expected: float

    @property
    def residual(self) -> float:
        return abs(self.value - self.expected)


@dataclass(frozen=True)
class ConditionReport:
    """Residuals of the order conditions checked for a tableau pair."""

    scheme: str
    up_to: int
    conditions: Tuple[OrderCondition, ...]
    tolerance: float = 1e-10

    @property
    def passed(self) -> bool:
        return all(cond.residual < self.tolerance for cond in self.conditions)

    @property
    def max_residual(self) -> float:
        return max((cond.residual for cond in self.conditions), default=0.0)

    def failures(self) -> List[OrderCondition]:
        return [cond for cond in self.conditions if cond.residual >= self.tolerance]


def verify_order_conditions(tab: ButcherTableauPair, up_to: int) -> ConditionReport:
    """
    Check the classical order conditions of both parts up to order ``up_to``.

    Args:
        tab: Tableau pair to check
        up_to: Highest order to check, one of 1, 2, 3

    Returns:
        ConditionReport; ``passed`` iff every residual is below 1e-10
    """
    if up_to not in (1, 2, 3):
        raise ValueError(f"up_to must be 1, 2 or 3, got {up_to}")

    conditions = []
    for part, A, b in (("explicit", tab.A, tab.b), ("implicit", tab.At, tab.bt)):
        c = A.sum(axis=1)
        conditions.append(OrderCondition("sum b_i", part, 1, float(b.sum()), 1.0))
        if up_to >= 2:
            conditions.append(OrderCondition("sum b_i c_i", part, 2, float(b @ c), 0.5))
        if up_to >= 3:
            conditions.append(OrderCondition("sum b_i c_i^2", part, 3, float(b @ (c * c)), 1.0 / 3.0))
            conditions.append(OrderCondition("sum b_i a_ij c_j", part, 3, float(b @ (A @ c)), 1.0 / 6.0))
    return ConditionReport(scheme=tab.name, up_to=up_to, conditions=tuple(conditions))


def tableau_stability_function(tab: ButcherTableauPair, z: complex, implicit: bool = True) -> complex:
    """R(z) = 1 + z b^T (I - zA)^{-1} 1 for the implicit or explicit half."""
    A, b = (tab.At, tab.bt) if implicit else (tab.A, tab.b)
    ones = np.ones(tab.s)
    return complex(1.0 + z * (b @ np.linalg.solve(np.eye(tab.s) - z * A, ones)))


# --- coefficient data --------------------------------------------------------

Quotient = Tuple[int, int]


def _rows(rows: Sequence[Sequence], s: int) -> np.ndarray:
    """Lower-triangular matrix from ragged rows of quotients or floats."""
    M = np.zeros((s, s))
    for i, row in enumerate(rows):
        for j, entry in enumerate(row):
            M[i, j] = _value(entry)
    return M


def _value(entry) -> float:
    if isinstance(entry, tuple):
        num, den = entry
        return num / den
    return float(entry)


def _vector(entries: Sequence) -> np.ndarray:
    return np.array([_value(e) for e in entries])


def _imex_rk2() -> ButcherTableauPair:
    gamma = 1.0 - 1.0 / sqrt(2.0)
    A = [[0.0, 0.0], [1.0, 0.0]]
    At = [[gamma, 0.0], [2.0 / sqrt(2.0) - 1.0, gamma]]
    b = [0.5, 0.5]
    return ButcherTableauPair("IMEX-RK2", np.array(A), np.array(b), np.array(At), np.array(b), order=2)


def _imex_rk3() -> ButcherTableauPair:
    gamma = (1767732205903, 4055673282236)
    b = [(1471266399579, 7840856788654), (-4482444167858, 7529755066697),
         (11266239266428, 11593286722821), gamma]
    A = [
        [],
        [(1767732205903, 2027836641118)],
        [(5535828885825, 10492691773637), (788022342437, 10882634858940)],
        [(6485989280629, 16251701735622), (-4246266847089, 9704473918619),
         (10755448449292, 10357097424841)],
    ]
    At = [
        [],
        [gamma, gamma],
        [(2746238789719, 10658868560708), (-640167445237, 6845629431997), gamma],
        b,
    ]
    return ButcherTableauPair("IMEX-RK3", _rows(A, 4), _vector(b), _rows(At, 4), _vector(b), order=3)


def _imex_rk4() -> ButcherTableauPair:
    b = [(82889, 524892), 0, (15625, 83664), (69875, 102672), (-2260, 8211), (1, 4)]
    A = [
        [],
        [(1, 2)],
        [(13861, 62500), (6889, 62500)],
        [(-116923316275, 2393684061468), (-2731218467317, 15368042101831),
         (9408046702089, 11113171139209)],
        [(-451086348788, 2902428689909), (-2682348792572, 7519795681897),
         (12662868775082, 11960479115383), (3355817975965, 11060851509271)],
        [(647845179188, 3216320057751), (73281519250, 8382639484533),
         (552539513391, 3454668386233), (3354512671639, 8306763924573), (4040, 17871)],
    ]
    At = [
        [],
        [(1, 4), (1, 4)],
        [(8611, 62500), (-1743, 31250), (1, 4)],
        [(5012029, 34652500), (-654441, 2922500), (174375, 388108), (1, 4)],
        [(15267082809, 155376265600), (-71443401, 120774400), (730878875, 902184768),
         (2285395, 8070912), (1, 4)],
        b,
    ]
    return ButcherTableauPair("IMEX-RK4", _rows(A, 6), _vector(b), _rows(At, 6), _vector(b), order=4)


def _imex_rk5() -> ButcherTableauPair:
    gamma = (41, 200)
    b = [(-872700587467, 9133579230613), 0, 0, (22348218063261, 9555858737531),
         (-1143369518992, 8141816002931), (-39379526789629, 19018526304540),
         (32727382324388, 42900044865799), gamma]
    A = [
        [],
        [(41, 100)],
        [(367902744464, 2072280473677), (677623207551, 8224143866563)],
        [(1268023523408, 10340822734521), 0, (1029933939417, 13636558850479)],
        [(14463281900351, 6315353703477), 0, (66114435211212, 5879490589093),
         (-54053170152839, 4284798021562)],
        [(14090043504691, 34967701212078), 0, (15191511035443, 11219624916014),
         (-18461159152457, 12425892160975), (-281667163811, 9011619295870)],
        [(19230459214898, 13134317526959), 0, (21275331358303, 2942455364971),
         (-38145345988419, 4862620318723), (-1, 8), (-1, 8)],
        [(-19977161125411, 11928030595625), 0, (-40795976796054, 6384907823539),
         (177454434618887, 12078138498510), (782672205425, 8267701900261),
         (-69563011059811, 9646580694205), (7356628210526, 4942186776405)],
    ]
    At = [
        [],
        [gamma, gamma],
        [(41, 400), (-567603406766, 11931857230679), gamma],
        [(683785636431, 9252920307686), 0, (-110385047103, 1367015193373), gamma],
        [(3016520224154, 10081342136671), 0, (30586259806659, 12414158314087),
         (-22760509404356, 11113319521817), gamma],
        [(218866479029, 1489978393911), 0, (638256894668, 5436446318841),
         (-1179710474555, 5321154724896), (-60928119172, 8023461067671), gamma],
        [(1020004230633, 5715676835656), 0, (25762820946817, 25263940353407),
         (-2161375909145, 9755907335909), (-211217309593, 5846859502534),
         (-4269925059573, 7827059040749), gamma],
        b,
    ]
    return ButcherTableauPair("IMEX-RK5", _rows(A, 8), _vector(b), _rows(At, 8), _vector(b), order=5)


def _explicit_pair(name: str, A, b, order: int) -> ButcherTableauPair:
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    return ButcherTableauPair(name, A, b, A.copy(), b.copy(), order=order)


def _erk4() -> ButcherTableauPair:
    A = [[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1, 0]]
    return _explicit_pair("RK4", A, [1 / 6, 1 / 3, 1 / 3, 1 / 6], order=4)


def _dopri5() -> ButcherTableauPair:
    # Classical Dormand-Prince 5(4), fifth-order weights, no embedded estimate.
    A = _rows([
        [],
        [(1, 5)],
        [(3, 40), (9, 40)],
        [(44, 45), (-56, 15), (32, 9)],
        [(19372, 6561), (-25360, 2187), (64448, 6561), (-212, 729)],
        [(9017, 3168), (-355, 33), (46732, 5247), (49, 176), (-5103, 18656)],
        [(35, 384), 0, (500, 1113), (125, 192), (-2187, 6784), (11, 84)],
    ], 7)
    b = _vector([(35, 384), 0, (500, 1113), (125, 192), (-2187, 6784), (11, 84), 0])
    return _explicit_pair("Dopri5", A, b, order=5)


def _euler() -> ButcherTableauPair:
    return _explicit_pair("Euler", [[0.0]], [1.0], order=1)


_BUILDERS = {
    SchemeId.IMEX_RK2: _imex_rk2,
    SchemeId.IMEX_RK3: _imex_rk3,
    SchemeId.IMEX_RK4: _imex_rk4,
    SchemeId.IMEX_RK5: _imex_rk5,
    SchemeId.ERK4: _erk4,
    SchemeId.DOPRI5_FIXED: _dopri5,
    SchemeId.EULER: _euler,
}


@lru_cache(maxsize=None)
def get_tableau(scheme_id) -> ButcherTableauPair:
    """
    Get the coefficient pair of a Runge-Kutta scheme.

    Args:
        scheme_id: SchemeId or its string spelling

    Returns:
        Immutable ButcherTableauPair

    Raises:
        UnknownSchemeError: for Crank-Nicolson (a stepper, not a tableau) or unknown ids
    """
    scheme = scheme_id if isinstance(scheme_id, SchemeId) else SchemeId.parse(str(scheme_id))
    builder = _BUILDERS.get(scheme)
    if builder is None:
        raise UnknownSchemeError(f"Scheme '{scheme.value}' is a stepper without a tableau pair")
    return builder()


def tableau_schemes() -> List[SchemeId]:
    """Scheme ids backed by a tableau pair."""
    return list(_BUILDERS)


def format_tableau(tab: ButcherTableauPair, precision: int = 10) -> Dict[str, List[List[str]]]:
    """Rows of formatted coefficients for display: ``c | A`` then ``| b`` for each half."""
    fmt = f"{{:.{precision}f}}"
    out: Dict[str, List[List[str]]] = {}
    for part, A, b, c in (("explicit", tab.A, tab.b, tab.c), ("implicit", tab.At, tab.bt, tab.ct)):
        rows = [[fmt.format(c[i])] + [fmt.format(v) for v in A[i]] for i in range(tab.s)]
        rows.append([""] + [fmt.format(v) for v in b])
        out[part] = rows
    return out
