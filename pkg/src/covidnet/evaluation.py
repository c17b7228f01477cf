"""Confusion matrices, per-class sensitivity/PPV and design-requirement gates.

Metrics are computed from exact fractions of integer counts. Percentages are
rounded to one decimal, half away from zero. A metric whose denominator is
zero is reported as :data:`UNDEFINED`, never as 0.
"""
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import LABEL_INDEX, LABELS

COVID = LABEL_INDEX["covid19"]
GATE_THRESHOLD = Fraction(4, 5)
TABLE_COLUMNS = ("Normal", "Non-COVID19", "COVID-19")


class _Undefined:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "UNDEFINED"

    def __str__(self):
        return "undefined"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


def _to_index(v):
    if isinstance(v, str):
        if v not in LABEL_INDEX:
            raise ValueError(f"unknown class {v!r}")
        return LABEL_INDEX[v]
    i = int(v)
    if not 0 <= i < len(LABELS):
        raise ValueError(f"class index {i} out of range")
    return i


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted, in (normal, pneumonia, covid19) order."""

    counts: tuple

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (3, 3):
            raise ValueError(f"confusion matrix must be 3x3, got shape {arr.shape}")
        if (arr < 0).any() or not np.all(arr == np.round(arr)):
            raise ValueError("confusion matrix entries must be nonnegative integers")
        object.__setattr__(self, "counts", tuple(tuple(int(v) for v in row) for row in arr))

    @property
    def array(self):
        return np.array(self.counts, dtype=np.int64)

    @property
    def total(self):
        return int(self.array.sum())

    def row_sum(self, i):
        return sum(self.counts[i])

    def col_sum(self, j):
        return sum(row[j] for row in self.counts)

    @property
    def trace(self):
        return sum(self.counts[i][i] for i in range(3))


def confusion(predictions, labels) -> ConfusionMatrix:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions but {len(labels)} labels")
    if not labels:
        raise ValueError("confusion needs at least one sample")
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, ([_to_index(v) for v in labels], [_to_index(v) for v in predictions]), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    return UNDEFINED if den == 0 else Fraction(num, den)


def round_percent(frac):
    """One-decimal percentage, half away from zero, as a string."""
    if frac is UNDEFINED:
        return "undefined"
    tenths = Fraction(frac) * 1000
    r = math.floor(abs(tenths) + Fraction(1, 2))
    r = -r if tenths < 0 else r
    return f"{r // 10}.{r % 10}" if r >= 0 else f"-{(-r) // 10}.{(-r) % 10}"


@dataclass(frozen=True)
class GateResult:
    name: str
    value: object  # Fraction or UNDEFINED
    threshold: Fraction
    passed: bool
    reason: str


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    accuracy_exact: Fraction
    sensitivity_exact: tuple
    ppv_exact: tuple
    gates: dict = field(default_factory=dict)

    @property
    def accuracy(self):
        return float(self.accuracy_exact)

    @property
    def sensitivity(self):
        return tuple(UNDEFINED if v is UNDEFINED else float(v) for v in self.sensitivity_exact)

    @property
    def ppv(self):
        return tuple(UNDEFINED if v is UNDEFINED else float(v) for v in self.ppv_exact)

    def percents(self):
        return {
            "accuracy": round_percent(self.accuracy_exact),
            "sensitivity": tuple(round_percent(v) for v in self.sensitivity_exact),
            "ppv": tuple(round_percent(v) for v in self.ppv_exact),
        }

    @property
    def all_gates_pass(self):
        return all(g.passed for g in self.gates.values())


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    sens = tuple(_ratio(cm.counts[i][i], cm.row_sum(i)) for i in range(3))
    ppv = tuple(_ratio(cm.counts[i][i], cm.col_sum(i)) for i in range(3))
    report = MetricsReport(cm, Fraction(cm.trace, cm.total), sens, ppv)
    report.gates = check_design_requirements(report)
    return report


def check_design_requirements(report: MetricsReport, threshold=GATE_THRESHOLD):
    """COVID-19 sensitivity and PPV must each reach ``threshold`` (inclusive)."""
    gates = {}
    for name, value in (("covid19_sensitivity", report.sensitivity_exact[COVID]),
                        ("covid19_ppv", report.ppv_exact[COVID])):
        if value is UNDEFINED:
            gates[name] = GateResult(name, value, threshold, False, "undefined (no samples in denominator)")
            continue
        passed = value >= threshold
        op = ">=" if passed else "<"
        gates[name] = GateResult(name, value, threshold, passed,
                                 f"{round_percent(value)} {op} {round_percent(Fraction(threshold))}")
    return gates


# --- reconstruction -------------------------------------------------------------

def reconstruct_confusion(sensitivity_pct, ppv_pct, accuracy_pct=None, row_total=100, fixed_cells=None):
    """All 3x3 nonnegative integer matrices with rows summing to ``row_total``
    whose rounded sensitivities, PPVs (and accuracy) match the given strings.

    Rows are enumerated exhaustively; a row is kept only if its own rounded
    sensitivity matches, which is exact because row sums are fixed.
    """
    fixed = dict(fixed_cells or {})
    row_options = []
    for i in range(3):
        opts = []
        for row in itertools.product(range(row_total + 1), repeat=2):
            rest = row_total - row[0] - row[1]
            if rest < 0:
                continue
            cells = [0, 0, 0]
            others = [j for j in range(3) if j != i]
            cells[i] = rest
            cells[others[0]], cells[others[1]] = row
            if round_percent(Fraction(cells[i], row_total)) != sensitivity_pct[i]:
                continue
            if any(cells[j] != v for (r, j), v in fixed.items() if r == i):
                continue
            opts.append(tuple(cells))
        row_options.append(opts)
    found = []
    for rows in itertools.product(*row_options):
        cm = ConfusionMatrix(rows)
        rep = metrics(cm)
        pc = rep.percents()
        if pc["ppv"] != tuple(ppv_pct):
            continue
        if accuracy_pct is not None and pc["accuracy"] != accuracy_pct:
            continue
        found.append(cm)
    return found


# --- rendering ------------------------------------------------------------------

def render_tables(report: MetricsReport, name="COVID-Net"):
    """Fixed-width sensitivity and PPV tables, one row for ``name``."""
    pc = report.percents()
    width = max(len("Architecture"), len(name))
    head = f"{'Architecture':<{width}}  " + "  ".join(f"{c:>11}" for c in TABLE_COLUMNS)
    bar = "-" * len(head)
    out = []
    for title, vals in (("Sensitivity (%)", pc["sensitivity"]), ("Positive Predictive Value (%)", pc["ppv"])):
        out += [bar, title.center(len(head)).rstrip(), bar, head, bar,
                f"{name:<{width}}  " + "  ".join(f"{v:>11}" for v in vals), bar, ""]
    out.append(f"Accuracy (%): {pc['accuracy']}")
    return "\n".join(out) + "\n"


def render_keyvalue(report: MetricsReport):
    """``key = value`` lines; percentages use the table rounding."""
    pc = report.percents()
    lines = [f"samples = {report.confusion.total}", f"accuracy = {pc['accuracy']}"]
    for i, label in enumerate(LABELS):
        lines.append(f"sensitivity.{label} = {pc['sensitivity'][i]}")
    for i, label in enumerate(LABELS):
        lines.append(f"ppv.{label} = {pc['ppv'][i]}")
    for g in report.gates.values():
        lines.append(f"gate.{g.name} = {'pass' if g.passed else 'fail'} ({g.reason})")
    lines.append("confusion = " + ";".join(",".join(str(v) for v in row) for row in report.confusion.counts))
    return "\n".join(lines) + "\n"


def parse_keyvalue(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
