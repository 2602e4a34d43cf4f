"""Plain-text LP interchange format (CPLEX-style subset).

Writes a MilpModel deterministically — variables in id order, one row
per line, shortest round-trip float repr — so identical models produce
byte-identical files.  The parser accepts the subset this package
writes (single-line rows, explicit bounds for every variable, a
Binaries section) and registers variables in Bounds-section order, so
write -> parse round-trips preserve variable ids.
"""

from __future__ import annotations

import math
import re
from typing import Iterable

from .model import MilpModel, ModelError

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")
_KEYWORDS = {"free", "inf"}


class LpParseError(ValueError):
    """The text is not in the supported LP subset."""


def _fmt(v: float) -> str:
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def _expr(terms: Iterable[tuple[int, float]], names: list[str]) -> str:
    parts: list[str] = []
    for vid, coef in terms:
        if not parts:
            lead = "-" if coef < 0 else ""
        else:
            lead = "- " if coef < 0 else "+ "
        mag = abs(coef)
        parts.append(f"{lead}{_fmt(mag)} {names[vid]}")
    return " ".join(parts) if parts else "0 " + names[0]


def write_lp(model: MilpModel) -> str:
    """Render the model as LP text."""
    if model.n_vars == 0:
        raise ModelError("cannot write an empty model")
    names = [v.name for v in model.vars]
    out: list[str] = [f"\\ {model.name}", "Minimize"]
    obj_terms = sorted(model.obj.items())
    out.append(" obj: " + _expr(obj_terms, names))
    out.append("Subject To")
    for name, terms, sense, rhs in model.rows:
        out.append(f" {name}: {_expr(terms, names)} {sense} {_fmt(rhs)}")
    out.append("Bounds")
    for v in model.vars:
        if v.lb == v.ub:
            out.append(f" {v.name} = {_fmt(v.lb)}")
        elif v.lb == -math.inf and v.ub == math.inf:
            out.append(f" {v.name} free")
        else:
            out.append(f" {_fmt(v.lb)} <= {v.name} <= {_fmt(v.ub)}")
    bins = model.binaries
    if bins:
        out.append("Binaries")
        for vid in bins:
            out.append(f" {names[vid]}")
    out.append("End")
    return "\n".join(out) + "\n"


def write_lp_file(model: MilpModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(write_lp(model))


def _strip_comment(line: str) -> str:
    pos = line.find("\\")
    return line if pos < 0 else line[:pos]


def _parse_number(tok: str) -> float:
    low = tok.lower().lstrip("+")
    if low in ("inf", "infinity"):
        return math.inf
    if low in ("-inf", "-infinity"):
        return -math.inf
    try:
        v = float(tok)
    except ValueError as exc:
        raise LpParseError(f"expected a number, got {tok!r}") from exc
    if v >= 1e30:
        return math.inf
    if v <= -1e30:
        return -math.inf
    return v


def _tokenize_expr(text: str) -> list[str]:
    # split keeping <=, >=, =, +, -, numbers, names
    return re.findall(r"<=|>=|=|\+|-|[A-Za-z_][A-Za-z0-9_.]*|[0-9.eE][-+0-9.eE]*", text)


def _parse_terms(tokens: list[str], getvar) -> tuple[list[tuple[int, float]], int]:
    """Parse a linear expression from the token list; returns (terms, stop index)."""
    terms: list[tuple[int, float]] = []
    i = 0
    sign = 1.0
    coef: float | None = None
    while i < len(tokens):
        tok = tokens[i]
        if tok in ("<=", ">=", "="):
            break
        if tok == "+":
            pass
        elif tok == "-":
            sign = -sign
        elif _NAME.fullmatch(tok) and tok.lower() not in _KEYWORDS:
            terms.append((getvar(tok), sign * (1.0 if coef is None else coef)))
            sign, coef = 1.0, None
        else:
            coef = _parse_number(tok)
        i += 1
    return terms, i


def read_lp(text: str) -> MilpModel:
    """Parse LP text written by write_lp back into a MilpModel."""
    lines = [_strip_comment(ln).strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]

    sections: dict[str, list[str]] = {}
    current = None
    for ln in lines:
        low = ln.lower()
        if low in ("minimize", "min"):
            current = "objective"
            sections[current] = []
        elif low in ("maximize", "max"):
            raise LpParseError("only minimization problems are supported")
        elif low in ("subject to", "st", "s.t.", "such that"):
            current = "rows"
            sections[current] = []
        elif low == "bounds":
            current = "bounds"
            sections[current] = []
        elif low in ("binaries", "binary", "bin"):
            current = "binaries"
            sections[current] = []
        elif low in ("generals", "general", "integers"):
            raise LpParseError("general integer variables are not supported")
        elif low == "end":
            current = None
        else:
            if current is None:
                raise LpParseError(f"content outside any section: {ln!r}")
            sections[current].append(ln)
    if "objective" not in sections:
        raise LpParseError("missing objective section")

    model = MilpModel(name="parsed")
    ids: dict[str, int] = {}

    def getvar(name: str) -> int:
        if name not in ids:
            ids[name] = model.add_var(name, lb=0.0, ub=math.inf)
        return ids[name]

    # Register variables in Bounds order first so ids round-trip.
    bound_lines = sections.get("bounds", [])
    for ln in bound_lines:
        toks = _tokenize_expr(ln)
        names = [t for t in toks if _NAME.fullmatch(t) and t.lower() not in _KEYWORDS]
        if len(names) != 1:
            raise LpParseError(f"cannot find the variable in bound line {ln!r}")
        getvar(names[0])

    # objective
    obj_text = " ".join(sections["objective"])
    if ":" in obj_text:
        obj_text = obj_text.split(":", 1)[1]
    terms, stop = _parse_terms(_tokenize_expr(obj_text), getvar)
    for vid, coef in terms:
        model.add_obj(vid, coef)

    for ln in sections.get("rows", []):
        if ":" in ln:
            rname, body = ln.split(":", 1)
            rname = rname.strip()
        else:
            rname, body = f"c{len(model.rows)}", ln
        toks = _tokenize_expr(body)
        terms, stop = _parse_terms(toks, getvar)
        if stop >= len(toks):
            raise LpParseError(f"row {rname!r} has no comparison operator")
        sense = toks[stop]
        rhs_toks = toks[stop + 1:]
        if not rhs_toks:
            raise LpParseError(f"row {rname!r} has no right-hand side")
        sign = 1.0
        val = None
        for tok in rhs_toks:
            if tok == "-":
                sign = -sign
            elif tok == "+":
                pass
            else:
                val = sign * _parse_number(tok)
        if val is None:
            raise LpParseError(f"row {rname!r} has no numeric right-hand side")
        model.add_row(rname, terms, sense, val)

    for ln in bound_lines:
        toks = _tokenize_expr(ln)
        names = [t for t in toks if _NAME.fullmatch(t) and t.lower() not in _KEYWORDS]
        vid = ids[names[0]]
        low = ln.lower()
        if low.endswith(" free"):
            model.vars[vid].lb, model.vars[vid].ub = -math.inf, math.inf
            continue
        name_pos = toks.index(names[0])
        ops = [t for t in toks if t in ("<=", ">=", "=")]
        nums: list[float] = []
        sign = 1.0
        for t in toks:
            if t == "-":
                sign = -sign
            elif t == "+":
                pass
            elif t in ("<=", ">=", "="):
                sign = 1.0
            elif t == names[0]:
                sign = 1.0
            else:
                nums.append(sign * _parse_number(t))
                sign = 1.0
        if ops == ["="]:
            model.vars[vid].lb = model.vars[vid].ub = nums[0]
        elif len(ops) == 2:
            model.vars[vid].lb, model.vars[vid].ub = nums[0], nums[1]
        elif ops == ["<="]:
            if name_pos == 0:
                model.vars[vid].ub = nums[0]
            else:
                model.vars[vid].lb = nums[0]
        elif ops == [">="]:
            if name_pos == 0:
                model.vars[vid].lb = nums[0]
            else:
                model.vars[vid].ub = nums[0]
        else:
            raise LpParseError(f"unsupported bound line {ln!r}")

    for ln in sections.get("binaries", []):
        for name in ln.split():
            if name not in ids:
                raise LpParseError(f"binary declares unknown variable {name!r}")
            vid = ids[name]
            model.vars[vid].lb = max(model.vars[vid].lb, 0.0)
            model.vars[vid].ub = min(model.vars[vid].ub, 1.0)
            model.vars[vid].binary = True

    model.validate()
    return model
