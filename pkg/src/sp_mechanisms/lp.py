import os
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from loguru import logger
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from .errors import InvalidInputError, LPStatusError, LPVerificationError, SolverError
from .piecewise import PiecewiseFunction
from .two_item import QRTables, check_coupling, natural_partial_pair

RECHECK_TOL = 1e-7
CLIP_TOL = 1e-9
DELTA_NUMERATOR = 2.92
TERMS_PER_LINE = 6

RELATIONS = ("<=", "=", ">=")
PROVENANCE_TAGS = ("sp", "competitiveness", "fullness", "feasibility", "nonnegativity")
PREFIX_TAGS = {
    "sp": "sp",
    "comp": "competitiveness",
    "full": "fullness",
    "feas": "feasibility",
    "nonneg": "nonnegativity",
}


@dataclass(frozen=True, slots=True)
class LPRow:
    """
    One constraint row

    Attributes:
        name: (str) row name; the part before the first underscore names its family
        coefficients: (dict) variable name -> coefficient
        relation: (str) one of <=, =, >=
        rhs: (float) right-hand side
        tag: (str) provenance of the row, one of PROVENANCE_TAGS
    """

    name: str
    coefficients: dict[str, float]
    relation: str
    rhs: float
    tag: str


@dataclass(frozen=True)
class LPInstance:
    """
    Linear program with named variables and tagged rows

    Attributes:
        name: (str) free-text description written into exported files
        variables: (tuple) declared variable names, in column order
        objective: (dict) variable name -> objective coefficient
        sense: (str) "max" or "min"
        rows: (tuple) constraint rows
        bounds: (dict) variable name -> (lower, upper); unlisted variables are [0, inf)
    """

    name: str
    variables: tuple[str, ...]
    objective: dict[str, float]
    rows: tuple[LPRow, ...]
    sense: str = "max"
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        declared = set(self.variables)
        if len(declared) != len(self.variables):
            raise InvalidInputError("variable names must be unique")
        if self.sense not in ("max", "min"):
            raise InvalidInputError(f"sense must be max or min, got {self.sense!r}")
        for source in (self.objective, self.bounds):
            unknown = set(source) - declared
            if unknown:
                raise InvalidInputError(f"undeclared variables referenced: {sorted(unknown)[:5]}")
        for row in self.rows:
            if row.tag not in PROVENANCE_TAGS or PREFIX_TAGS.get(row.name.split("_", 1)[0]) != row.tag:
                raise InvalidInputError(f"row {row.name} has a missing or mismatched provenance tag {row.tag!r}")
            if row.relation not in RELATIONS:
                raise InvalidInputError(f"row {row.name} has unknown relation {row.relation!r}")
            if not declared.issuperset(row.coefficients):
                raise InvalidInputError(f"row {row.name} references undeclared variables")

    def bound(self, variable: str) -> tuple[float, float]:
        return self.bounds.get(variable, (0.0, np.inf))

    def count(self, tag: str) -> int:
        return sum(1 for row in self.rows if row.tag == tag)


@dataclass(frozen=True)
class LPSolution:
    """
    Attributes:
        status: (str) optimal, infeasible or unbounded
        objective_value: (float, optional) objective at the optimum
        variable_values: (dict) variable name -> value, empty unless optimal
        backend: (str) solver that produced it
    """

    status: str
    objective_value: float | None
    variable_values: dict[str, float]
    backend: str = "highs"

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass
class SolverMeta:
    """
    Known LP backends

    Attributes:
        backend_map: (dict) backend id -> scipy linprog method; "external" runs a
                HiGHS executable found through solver_path_env
        status_map: (dict) linprog status code -> reported status
        linprog_options: (dict) HiGHS tolerances, kept below the re-check tolerance
        solver_path_env: (str) environment variable naming the external executable
        backend_env: (str) environment variable holding the default backend id
    """

    backend_map = {"highs": "highs", "simplex": "highs-ds", "ipm": "highs-ipm", "external": None}
    status_map = {0: "optimal", 2: "infeasible", 3: "unbounded"}
    linprog_options = {"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9}
    solver_path_env: str = "SP_MECHANISMS_SOLVER_PATH"
    backend_env: str = "SP_MECHANISMS_BACKEND"

    def default_backend(self) -> str:
        return os.getenv(self.backend_env, "highs")

    def method_for(self, backend: str) -> str | None:
        if backend not in self.backend_map:
            raise InvalidInputError(f"unknown LP backend {backend!r}; choose from {sorted(self.backend_map)}")
        return self.backend_map[backend]


def _grid_variable(i: int, j: int) -> str:
    return f"A_{i}_{j}"


def _welfare_terms(n: int, i: int, j: int) -> Iterator[tuple[str, float]]:
    """Terms of u_hat(t_i, t_j) = t_i A(t_i, t_j) + (1 - t_i) A(1 - t_i, 1 - t_j)"""
    t = i / n
    yield _grid_variable(i, j), t
    yield _grid_variable(n - i, n - j), 1.0 - t


def _accumulate(terms: Iterator[tuple[str, float]] | list[tuple[str, float]]) -> dict[str, float]:
    out: dict[str, float] = {}
    for name, value in terms:
        out[name] = out.get(name, 0.0) + value
    return {name: value for name, value in out.items() if value != 0.0}


def build_gc_lp(n: int, variant: str = "full", prune: bool = False) -> LPInstance:
    """
    Upper-bound LP over grid mechanisms A(t1, t2), t1, t2 in {0, 1/n, ..., 1}
        :param n: grid resolution, at least 2
        :param variant: "full" (A(t1,t2) + A(t2,t1) = 1) or "partial" (<= 1)
        :param prune: keep only SP rows between neighbouring own types
    Returns the instance maximising lam
    """
    if n < 2:
        raise InvalidInputError(f"LP grid resolution must be at least 2, got {n}")
    if variant not in ("full", "partial"):
        raise InvalidInputError(f"variant must be full or partial, got {variant!r}")
    points = range(n + 1)
    variables = tuple(_grid_variable(i, j) for i in points for j in points) + ("lam",)
    rows: list[LPRow] = []

    for j in points:
        for i in points:
            deviations = (i - 1, i + 1) if prune else points
            for k in deviations:
                if k == i or not 0 <= k <= n:
                    continue
                t = i / n
                coefficients = _accumulate(
                    list(_welfare_terms(n, i, j))
                    + [(_grid_variable(k, j), -t), (_grid_variable(n - k, n - j), -(1.0 - t))]
                )
                rows.append(LPRow(f"sp_{i}_{k}_{j}", coefficients, ">=", 0.0, "sp"))

    for i in points:
        for j in range(i, n + 1):
            welfare = list(_welfare_terms(n, i, j)) + list(_welfare_terms(n, j, i))
            welfare.append(("lam", -(1.0 + abs(i - j) / n)))
            rows.append(LPRow(f"comp_{i}_{j}", _accumulate(welfare), ">=", 0.0, "competitiveness"))
            pair = _accumulate([(_grid_variable(i, j), 1.0), (_grid_variable(j, i), 1.0)])
            if variant == "full":
                rows.append(LPRow(f"full_{i}_{j}", pair, "=", 1.0, "fullness"))
            else:
                rows.append(LPRow(f"feas_{i}_{j}", pair, "<=", 1.0, "feasibility"))

    logger.debug(f"Built {variant} LP n={n} prune={prune}: {len(variables)} variables, {len(rows)} rows")
    return LPInstance(
        name=f"gc {variant} n={n} prune={int(prune)}",
        variables=variables,
        objective={"lam": 1.0},
        rows=tuple(rows),
        bounds={"lam": (-np.inf, np.inf)},
    )


def default_delta(n: int) -> float:
    return DELTA_NUMERATOR / (2.0 * n)


def _qr_terms(n: int, i: int, j: int, f1_values: np.ndarray, f2_values: np.ndarray) -> list[tuple[str, float]]:
    """A(t_i, t_j) of the partial family as a linear form in Q and R; f1_values[n + 1] holds f1(1/2)"""
    if 2 * i <= n:
        return [(f"Q_{j}", float(f1_values[i])), (f"R_{j}", 1.0)]
    return [(f"Q_{j}", float(f1_values[n + 1])), (f"R_{j}", 1.0), (f"Q_{n - j}", float(f2_values[i]))]


def build_qr_lp(
    n: int, delta: float | None = None, f1: PiecewiseFunction | None = None, f2: PiecewiseFunction | None = None
) -> LPInstance:
    """
    Synthesis LP for the Q/R tables of the partial family
        :param n: grid resolution, at least 2
        :param delta: feasibility headroom in [0, 1); None picks 2.92 / (2n)
        :param f1: first-branch function on [0, 1/2]
        :param f2: second-branch function on [1/2, 1]
    f1 and f2 default to natural_partial_pair()
    """
    if n < 2:
        raise InvalidInputError(f"LP grid resolution must be at least 2, got {n}")
    delta = default_delta(n) if delta is None else float(delta)
    if not 0.0 <= delta < 1.0:
        raise InvalidInputError(f"delta must lie in [0, 1), got {delta}")
    if f1 is None or f2 is None:
        f1, f2 = natural_partial_pair()
    check_coupling(f1, f2)

    grid = np.arange(n + 1) / n
    upper = 2 * np.arange(n + 1) > n
    f1_values = np.zeros(n + 2)
    f1_values[: n + 1][~upper] = np.asarray(f1(grid[~upper]), dtype=float)
    f1_values[n + 1] = float(f1(0.5))
    f2_values = np.zeros(n + 1)
    f2_values[upper] = np.asarray(f2(grid[upper]), dtype=float)

    variables = tuple(f"Q_{k}" for k in range(n + 1)) + tuple(f"R_{k}" for k in range(n + 1)) + ("lam",)
    rows: list[LPRow] = []
    for i in range(n + 1):
        for j in range(i, n + 1):
            pair = _accumulate(_qr_terms(n, i, j, f1_values, f2_values) + _qr_terms(n, j, i, f1_values, f2_values))
            rows.append(LPRow(f"feas_{i}_{j}", pair, "<=", 1.0 - delta, "feasibility"))
            welfare: list[tuple[str, float]] = []
            for own, other in ((i, j), (j, i)):
                t = own / n
                welfare += [(name, t * value) for name, value in _qr_terms(n, own, other, f1_values, f2_values)]
                welfare += [
                    (name, (1.0 - t) * value) for name, value in _qr_terms(n, n - own, n - other, f1_values, f2_values)
                ]
            welfare.append(("lam", -(1.0 + abs(i - j) / n)))
            rows.append(LPRow(f"comp_{i}_{j}", _accumulate(welfare), ">=", 0.0, "competitiveness"))

    logger.debug(f"Built Q/R LP n={n} delta={delta:.6g}: {len(variables)} variables, {len(rows)} rows")
    return LPInstance(
        name=f"qr n={n} delta={delta!r}",
        variables=variables,
        objective={"lam": 1.0},
        rows=tuple(rows),
        bounds={"lam": (-np.inf, np.inf)},
    )


def _matrices(lp: LPInstance) -> dict[str, Any]:
    index = {name: k for k, name in enumerate(lp.variables)}
    parts: dict[str, tuple[list[int], list[int], list[float], list[float]]] = {
        "ub": ([], [], [], []),
        "eq": ([], [], [], []),
    }
    for row in lp.rows:
        key = "eq" if row.relation == "=" else "ub"
        sign = -1.0 if row.relation == ">=" else 1.0
        row_ids, cols, data, rhs = parts[key]
        r = len(rhs)
        for name, value in row.coefficients.items():
            row_ids.append(r)
            cols.append(index[name])
            data.append(sign * value)
        rhs.append(sign * row.rhs)

    out: dict[str, Any] = {}
    for key, (row_ids, cols, data, rhs) in parts.items():
        if rhs:
            out[f"A_{key}"] = coo_matrix((data, (row_ids, cols)), shape=(len(rhs), len(index))).tocsr()
            out[f"b_{key}"] = np.array(rhs)
    return out


def _recheck(lp: LPInstance, values: dict[str, float]) -> None:
    worst_name, worst = "", 0.0
    for row in lp.rows:
        activity = sum(value * values[name] for name, value in row.coefficients.items())
        if row.relation == "<=":
            violation = activity - row.rhs
        elif row.relation == ">=":
            violation = row.rhs - activity
        else:
            violation = abs(activity - row.rhs)
        if violation > worst:
            worst_name, worst = row.name, violation
    for name in lp.variables:
        lower, upper = lp.bound(name)
        violation = max(lower - values[name], values[name] - upper)
        if violation > worst:
            worst_name, worst = f"bound:{name}", violation
    if worst > RECHECK_TOL:
        raise LPVerificationError(worst_name, worst)
    logger.debug(f"Re-check passed; largest row residual {worst:.3e}")


def _solve_linprog(lp: LPInstance, method: str, backend: str) -> LPSolution:
    sign = -1.0 if lp.sense == "max" else 1.0
    c = np.array([sign * lp.objective.get(name, 0.0) for name in lp.variables])
    bounds = [lp.bound(name) for name in lp.variables]
    bounds = [(None if np.isinf(lo) else lo, None if np.isinf(hi) else hi) for lo, hi in bounds]
    res = linprog(c, bounds=bounds, method=method, options=SolverMeta.linprog_options, **_matrices(lp))
    status = SolverMeta.status_map.get(res.status)
    if status is None:
        raise SolverError(f"{backend} stopped with status {res.status}: {res.message}")
    if status != "optimal":
        logger.info(f"{lp.name}: {status}")
        return LPSolution(status=status, objective_value=None, variable_values={}, backend=backend)
    values = dict(zip(lp.variables, (float(x) for x in res.x)))
    return LPSolution(status, sign * float(res.fun), values, backend)


def _parse_highs_solution(text: str) -> tuple[str, float | None, dict[str, float]]:
    lines = [line.strip() for line in text.splitlines()]
    status_line = next((lines[k + 1] for k, line in enumerate(lines[:-1]) if line == "Model status"), "")
    status = {"Optimal": "optimal", "Infeasible": "infeasible", "Unbounded": "unbounded"}.get(status_line)
    if status is None:
        raise SolverError(f"external solver reported model status {status_line!r}")
    objective = None
    values: dict[str, float] = {}
    for k, line in enumerate(lines):
        if line.startswith("Objective "):
            objective = float(line.split()[1])
        match = re.match(r"# Columns (\d+)", line)
        if match and not values:
            for entry in lines[k + 1 : k + 1 + int(match.group(1))]:
                name, value = entry.split()[:2]
                values[name] = float(value)
    return status, objective, values


def _solve_external(lp: LPInstance) -> LPSolution:
    meta = SolverMeta()
    executable = os.getenv(meta.solver_path_env)
    if not executable:
        raise SolverError(f"set {meta.solver_path_env} to use the external backend")
    with tempfile.TemporaryDirectory() as workdir:
        model, solution = Path(workdir) / "model.lp", Path(workdir) / "model.sol"
        export_lp(lp, model)
        logger.debug(f"Running {executable} on {model}")
        completed = subprocess.run(
            [executable, "--model_file", str(model), "--solution_file", str(solution)],
            capture_output=True,
            text=True,
            check=False,
        )
        if completed.returncode != 0 or not solution.exists():
            raise SolverError(f"external solver exited with {completed.returncode}: {completed.stderr.strip()}")
        status, objective, values = _parse_highs_solution(solution.read_text())
    if status != "optimal":
        return LPSolution(status=status, objective_value=None, variable_values={}, backend="external")
    missing = set(lp.variables) - set(values)
    if missing:
        raise SolverError(f"external solution lacks {len(missing)} variables, e.g. {sorted(missing)[0]}")
    return LPSolution("optimal", objective, {name: values[name] for name in lp.variables}, "external")


def solve(lp: LPInstance, backend: str | None = None) -> LPSolution:
    """
    Solves the instance and re-checks every row of an optimum at RECHECK_TOL
        :param lp: instance to solve
        :param backend: highs, simplex, ipm or external; None reads SP_MECHANISMS_BACKEND
    Infeasible and unbounded problems come back as statuses; anything else raises SolverError
    """
    meta = SolverMeta()
    backend = backend or meta.default_backend()
    method = meta.method_for(backend)
    logger.debug(f"Solving {lp.name} with {backend} ({len(lp.variables)} variables, {len(lp.rows)} rows)")
    solution = _solve_external(lp) if method is None else _solve_linprog(lp, method, backend)
    if solution.optimal:
        _recheck(lp, solution.variable_values)
        logger.info(f"{lp.name}: optimal objective {solution.objective_value:.9f}")
    return solution


def _format_terms(coefficients: dict[str, float], placeholder: str) -> list[str]:
    terms = [f"{value:+.17g} {name}" for name, value in coefficients.items()] or [f"+0 {placeholder}"]
    return [" ".join(terms[k : k + TERMS_PER_LINE]) for k in range(0, len(terms), TERMS_PER_LINE)]


def _format_number(value: float) -> str:
    if np.isinf(value):
        return "+inf" if value > 0 else "-inf"
    return f"{value:.17g}"


def export_lp(lp: LPInstance, path: str | Path) -> None:
    """
    Writes the instance in CPLEX LP format. Every variable gets an explicit line
    in the Bounds section, in column order, so readers see the full declaration.
    """
    lines = [f"\\ {lp.name}", "Maximize" if lp.sense == "max" else "Minimize"]
    objective = _format_terms(lp.objective, lp.variables[0])
    lines.append(f" obj: {objective[0]}")
    lines.extend(f"   {part}" for part in objective[1:])
    lines.append("Subject To")
    for row in lp.rows:
        parts = _format_terms(row.coefficients, lp.variables[0])
        parts[-1] += f" {row.relation} {_format_number(row.rhs)}"
        lines.append(f" {row.name}: {parts[0]}")
        lines.extend(f"   {part}" for part in parts[1:])
    lines.append("Bounds")
    for name in lp.variables:
        lower, upper = lp.bound(name)
        if np.isinf(lower) and np.isinf(upper):
            lines.append(f" {name} free")
        elif np.isinf(upper):
            lines.append(f" {name} >= {_format_number(lower)}")
        else:
            lines.append(f" {_format_number(lower)} <= {name} <= {_format_number(upper)}")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")
    logger.debug(f"Exported {len(lp.variables)} variables and {len(lp.rows)} rows to {path}")


def _parse_terms(tokens: list[str]) -> dict[str, float]:
    if len(tokens) % 2:
        raise InvalidInputError(f"malformed linear expression: {' '.join(tokens)}")
    out: dict[str, float] = {}
    for coefficient, name in zip(tokens[::2], tokens[1::2]):
        value = float(coefficient)
        if value != 0.0:
            out[name] = value
    return out


def _statements(body: list[str]) -> Iterator[str]:
    """Joins continuation lines onto the named statement they belong to"""
    current = ""
    for line in body:
        if ":" in line and current:
            yield current
            current = ""
        current = f"{current} {line.strip()}".strip()
    if current:
        yield current


def read_lp(path: str | Path) -> LPInstance:
    """Reads a file written by export_lp back into an LPInstance"""
    text = Path(path).read_text().splitlines()
    name = text[0][2:].strip() if text and text[0].startswith("\\") else Path(path).stem
    sections: dict[str, list[str]] = {}
    current = None
    for line in text:
        if line.startswith("\\") or not line.strip():
            continue
        keyword = line.strip()
        if keyword in ("Maximize", "Minimize", "Subject To", "Bounds", "End"):
            current = keyword
            sections.setdefault(keyword, [])
            continue
        if current is None:
            raise InvalidInputError(f"content before the first section in {path}")
        sections[current].append(line)

    sense = "max" if "Maximize" in sections else "min"
    objective_text = " ".join(part.strip() for part in sections.get("Maximize", sections.get("Minimize", [])))
    objective = _parse_terms(objective_text.split(":", 1)[1].split()) if objective_text else {}

    rows = []
    for statement in _statements(sections.get("Subject To", [])):
        row_name, expression = (part.strip() for part in statement.split(":", 1))
        tokens = expression.split()
        relation, rhs = tokens[-2], float(tokens[-1])
        tag = PREFIX_TAGS.get(row_name.split("_", 1)[0])
        if tag is None:
            raise InvalidInputError(f"row {row_name} has no known provenance prefix")
        rows.append(LPRow(row_name, _parse_terms(tokens[:-2]), relation, rhs, tag))

    variables, bounds = [], {}
    for line in sections.get("Bounds", []):
        tokens = line.split()
        if len(tokens) == 2 and tokens[1] == "free":
            variables.append(tokens[0])
            bounds[tokens[0]] = (-np.inf, np.inf)
        elif len(tokens) == 3 and tokens[1] == ">=":
            variables.append(tokens[0])
            if float(tokens[2]) != 0.0:
                bounds[tokens[0]] = (float(tokens[2]), np.inf)
        elif len(tokens) == 5:
            variables.append(tokens[2])
            bounds[tokens[2]] = (float(tokens[0]), float(tokens[4]))
        else:
            raise InvalidInputError(f"unreadable bound line {line.strip()!r}")
    return LPInstance(
        name=name, variables=tuple(variables), objective=objective, rows=tuple(rows), sense=sense, bounds=bounds
    )


def extract_qr_tables(sol: LPSolution, n: int, delta: float) -> QRTables:
    """
    Packages the solved Q and R columns for partial_family_mechanism
        :param sol: optimal solution of build_qr_lp(n, delta, ...)
        :param n: grid resolution the LP was built with
        :param delta: headroom the LP was built with
    """
    if not sol.optimal or sol.objective_value is None:
        raise LPStatusError(sol.status)
    tables = {}
    for letter in ("Q", "R"):
        column = np.array([sol.variable_values[f"{letter}_{k}"] for k in range(n + 1)])
        if column.min() < -CLIP_TOL:
            raise SolverError(f"{letter} has a negative entry {column.min():.3e} beyond the clip tolerance")
        if column.min() < 0.0:
            logger.warning(f"Clipping {letter} entries down to {column.min():.3e} to zero")
        tables[letter] = tuple(np.maximum(column, 0.0))
    qr = QRTables(n=n, q_values=tables["Q"], r_values=tables["R"], delta=delta, lam=sol.objective_value)
    logger.info(f"Extracted Q/R tables n={n}: lambda {qr.lam:.6f}, max Q {qr.max_q:.4f}")
    return qr


def solution_to_json(sol: LPSolution, tol: float = 1e-12) -> dict[str, Any]:
    return {
        "status": sol.status,
        "backend": sol.backend,
        "objective": sol.objective_value,
        "nonzeros": {name: value for name, value in sol.variable_values.items() if abs(value) > tol},
    }
