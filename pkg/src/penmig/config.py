"""Declarative model configuration files.

A configuration is a small line-oriented text format::

    # comment
    family   = gaussian
    response = y
    offset   = log_exposure          # optional
    fixed    = [age, sex]            # optional, unselected covariates
    hyper { v0 = 0.00025, a_tau = 5, b_tau = 25 }
    term { kind = pspline, var = x1, basis = 20 }
    term {
        kind  = varying_coefficient
        var   = [x2, u]
        label = x2_by_u
    }

Inside braces, entries are separated by commas or newlines. Lists are
written in square brackets. Omitted hyperparameters take the defaults of
:class:`penmig.model.Hyperparams`.

Term keys: ``kind``, ``var`` (one name or a list), ``label`` (defaults to
the covariate names joined by ``_``), ``basis``, ``degree``, ``order``,
``nmig`` (``true``/``false``) and ``base`` (``pspline``/``mrf``).
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .model import FAMILIES, Family, Hyperparams, ModelError, ModelSpec, build_model
from .terms import TERM_KINDS, TermError, TermSpec

__all__ = ["ConfigError", "ModelConfig", "parse_model_config", "render_model_config"]

_HYPER_KEYS = ("v0", "a_tau", "b_tau", "a_w", "b_w", "a_sigma", "b_sigma")
_TERM_KEYS = ("kind", "var", "label", "basis", "degree", "order", "nmig", "base")
_TOP_KEYS = ("family", "response", "offset", "fixed")

_TOKEN = re.compile(
    r"""
    (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<space>[ \t\r]+)
  | (?P<punct>[={}\[\],])
  | (?P<quoted>"[^"\n]*")
  | (?P<word>[^\s={}\[\],"\#]+)
    """,
    re.VERBOSE,
)


class ConfigError(ValueError):
    """Configuration error with a ``line:column`` position."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col
        self.reason = message


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


@dataclass
class _Value:
    value: object  # str or list of str
    line: int
    col: int


def _tokenize(text: str) -> list:
    toks, line, start = [], 1, 0
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ConfigError(f"unexpected character {text[pos]!r}", line, pos - start + 1)
        kind = m.lastgroup
        col = pos - start + 1
        if kind == "newline":
            toks.append(_Tok("newline", "\n", line, col))
            line += 1
            start = m.end()
        elif kind == "punct":
            toks.append(_Tok(m.group(), m.group(), line, col))
        elif kind == "quoted":
            toks.append(_Tok("word", m.group()[1:-1], line, col))
        elif kind == "word":
            toks.append(_Tok("word", m.group(), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, what: str) -> _Tok:
        tok = self.next()
        if tok.kind != kind:
            shown = "end of input" if tok.kind == "eof" else repr(tok.text)
            raise ConfigError(f"expected {what}, found {shown}", tok.line, tok.col)
        return tok

    def skip(self, *kinds):
        while self.peek().kind in kinds:
            self.i += 1

    def value(self) -> _Value:
        tok = self.next()
        if tok.kind == "word":
            return _Value(tok.text, tok.line, tok.col)
        if tok.kind == "[":
            items = []
            self.skip("newline")
            while self.peek().kind != "]":
                items.append(self.expect("word", "a list item").text)
                self.skip("newline")
                if self.peek().kind == ",":
                    self.next()
                    self.skip("newline")
                elif self.peek().kind != "]":
                    t = self.peek()
                    raise ConfigError("expected ',' or ']'", t.line, t.col)
            self.next()
            return _Value(items, tok.line, tok.col)
        raise ConfigError("expected a value", tok.line, tok.col)

    def pairs(self) -> tuple:
        """Parse ``key = value`` entries up to the closing brace."""
        out = {}
        self.skip("newline", ",")
        while self.peek().kind != "}":
            key = self.expect("word", "a key")
            self.expect("=", "'='")
            if key.text in out:
                raise ConfigError(f"duplicate key {key.text!r}", key.line, key.col)
            out[key.text] = (key, self.value())
            nxt = self.peek()
            if nxt.kind not in ("newline", ",", "}"):
                raise ConfigError("expected ',', newline or '}'", nxt.line, nxt.col)
            self.skip("newline", ",")
        self.next()
        return out

    def statements(self) -> list:
        stmts = []
        self.skip("newline")
        while self.peek().kind != "eof":
            key = self.expect("word", "a statement")
            nxt = self.next()
            if nxt.kind == "{":
                stmts.append(("block", key, self.pairs()))
            elif nxt.kind == "=":
                stmts.append(("assign", key, self.value()))
            else:
                raise ConfigError("expected '=' or '{'", nxt.line, nxt.col)
            end = self.peek()
            if end.kind not in ("newline", "eof"):
                raise ConfigError("expected end of line", end.line, end.col)
            self.skip("newline")
        return stmts


@dataclass
class ModelConfig:
    """Parsed model configuration (a :class:`ModelSpec` skeleton without data)."""

    family: str = "gaussian"
    response: str = "y"
    terms: list = field(default_factory=list)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    offset: Optional[str] = None
    fixed: list = field(default_factory=list)

    @property
    def columns(self) -> list:
        """All data columns the configuration refers to."""
        cols = [self.response] + ([self.offset] if self.offset else []) + list(self.fixed)
        for t in self.terms:
            cols.extend(t.covariates)
        return list(dict.fromkeys(cols))

    def build(self, data, **kwargs) -> ModelSpec:
        """Evaluate the configuration on a data table."""
        return build_model(
            data,
            self.terms,
            self.response,
            family=self.family,
            hyper=self.hyper,
            offset=self.offset,
            fixed=self.fixed,
            **kwargs,
        )


def _scalar(v: _Value, name: str) -> str:
    if isinstance(v.value, list):
        raise ConfigError(f"{name} takes a single value, not a list", v.line, v.col)
    return v.value


def _int(v: _Value, name: str) -> int:
    s = _scalar(v, name)
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {s!r}", v.line, v.col) from None


def _bool(v: _Value, name: str) -> bool:
    s = _scalar(v, name).lower()
    if s in ("true", "yes", "1"):
        return True
    if s in ("false", "no", "0"):
        return False
    raise ConfigError(f"{name} must be true or false, got {s!r}", v.line, v.col)


def _term(key: _Tok, entries: dict) -> tuple:
    for name, (k, _) in entries.items():
        if name not in _TERM_KEYS:
            raise ConfigError(f"unknown term key {name!r}", k.line, k.col)
    if "kind" not in entries:
        raise ConfigError("term without 'kind'", key.line, key.col)
    if "var" not in entries:
        raise ConfigError("term without 'var'", key.line, key.col)
    kind_v = entries["kind"][1]
    kind = _scalar(kind_v, "kind")
    if kind not in TERM_KINDS:
        raise ConfigError(
            f"unknown term kind {kind!r}; expected one of {', '.join(TERM_KINDS)}",
            kind_v.line,
            kind_v.col,
        )
    var_v = entries["var"][1]
    covariates = var_v.value if isinstance(var_v.value, list) else [var_v.value]
    kw = {"kind": kind, "covariates": covariates}
    kw["label"] = (
        _scalar(entries["label"][1], "label") if "label" in entries else "_".join(covariates)
    )
    if "basis" in entries:
        kw["num_basis"] = _int(entries["basis"][1], "basis")
    if "degree" in entries:
        kw["spline_degree"] = _int(entries["degree"][1], "degree")
    if "order" in entries:
        kw["penalty_order"] = _int(entries["order"][1], "order")
    if "nmig" in entries:
        kw["nmig"] = _bool(entries["nmig"][1], "nmig")
    if "base" in entries:
        kw["base"] = _scalar(entries["base"][1], "base")
    try:
        return TermSpec(**kw), var_v
    except TermError as exc:
        raise ConfigError(str(exc), key.line, key.col) from None


def _hyper(entries: dict) -> Hyperparams:
    values = {}
    for name, (k, v) in entries.items():
        if name not in _HYPER_KEYS:
            raise ConfigError(f"unknown hyperparameter {name!r}", k.line, k.col)
        s = _scalar(v, name)
        try:
            values[name] = float(s)
        except ValueError:
            raise ConfigError(f"{name} must be a number, got {s!r}", v.line, v.col) from None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return Hyperparams(**values)
    except ModelError as exc:
        bad = next((n for n in values if n in str(exc)), next(iter(entries), None))
        k = entries[bad][1] if bad else None
        line, col = (k.line, k.col) if k else (1, 1)
        raise ConfigError(str(exc), line, col) from None


def parse_model_config(text: str, columns: Optional[Sequence[str]] = None) -> ModelConfig:
    """Parse a model configuration.

    Parameters
    ----------
    text : str
        Configuration source.
    columns : sequence of str, optional
        Available data columns. When given, every referenced covariate,
        the response and the offset must be among them.

    Returns
    -------
    ModelConfig

    Raises
    ------
    ConfigError
        With the line and column of the offending entry.
    """
    stmts = _Parser(text).statements()
    cfg = ModelConfig()
    seen_top, seen_hyper, labels = set(), False, {}
    refs = []
    for kind, key, payload in stmts:
        name = key.text
        if kind == "assign":
            if name not in _TOP_KEYS:
                raise ConfigError(f"unknown setting {name!r}", key.line, key.col)
            if name in seen_top:
                raise ConfigError(f"{name!r} given twice", key.line, key.col)
            seen_top.add(name)
            if name == "family":
                fam = _scalar(payload, "family")
                try:
                    fam = Family(fam).kind
                except ModelError:
                    raise ConfigError(
                        f"unknown family {fam!r}; expected one of {', '.join(FAMILIES)}",
                        payload.line,
                        payload.col,
                    ) from None
                cfg.family = fam
            elif name == "fixed":
                cfg.fixed = payload.value if isinstance(payload.value, list) else [payload.value]
                refs.extend((c, payload) for c in cfg.fixed)
            else:
                setattr(cfg, name, _scalar(payload, name))
                refs.append((getattr(cfg, name), payload))
        else:
            if name == "term":
                term, var_v = _term(key, payload)
                if term.label in labels:
                    raise ConfigError(
                        f"duplicate term label {term.label!r} (first defined on line "
                        f"{labels[term.label]})",
                        key.line,
                        key.col,
                    )
                labels[term.label] = key.line
                cfg.terms.append(term)
                refs.extend((c, var_v) for c in term.covariates)
            elif name == "hyper":
                if seen_hyper:
                    raise ConfigError("hyper block given twice", key.line, key.col)
                seen_hyper = True
                cfg.hyper = _hyper(payload)
            else:
                raise ConfigError(f"unknown block {name!r}", key.line, key.col)
    if "response" not in seen_top:
        raise ConfigError("missing 'response' setting", 1, 1)
    if columns is not None:
        available = set(columns)
        for col, where in refs:
            if col not in available:
                raise ConfigError(f"column {col!r} not found in data", where.line, where.col)
    return cfg


def _fmt(x: float) -> str:
    return repr(float(x))


def _word(s: str) -> str:
    return s if re.fullmatch(r"[^\s={}\[\],\"#]+", s) else f'"{s}"'


def render_model_config(cfg: ModelConfig) -> str:
    """Render a configuration that :func:`parse_model_config` reads back unchanged."""
    lines = [f"family = {Family(cfg.family).kind}"]
    lines.append(f"response = {_word(cfg.response)}")
    if cfg.offset:
        lines.append(f"offset = {_word(cfg.offset)}")
    if cfg.fixed:
        lines.append("fixed = [" + ", ".join(_word(c) for c in cfg.fixed) + "]")
    h = cfg.hyper
    lines.append(
        "hyper { " + ", ".join(f"{k} = {_fmt(getattr(h, k))}" for k in _HYPER_KEYS) + " }"
    )
    for t in cfg.terms:
        if t.adjacency is not None:
            raise ValueError(f"term {t.label!r}: adjacency matrices cannot be rendered")
        var = "[" + ", ".join(_word(c) for c in t.covariates) + "]"
        parts = [f"kind = {t.kind}", f"var = {var}", f"label = {_word(t.label)}"]
        parts += [f"basis = {t.num_basis}", f"degree = {t.spline_degree}"]
        if t.penalty_order is not None:
            parts.append(f"order = {t.penalty_order}")
        parts.append(f"nmig = {'true' if t.nmig else 'false'}")
        if t.kind == "varying_coefficient":
            parts.append(f"base = {t.base}")
        lines.append("term { " + ", ".join(parts) + " }")
    return "\n".join(lines) + "\n"
