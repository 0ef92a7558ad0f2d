"""Text notation for architectures.

    input 28 28 1 / F(8,8,2,2) / G(25) / F(11,11,1,1) / G(36)

Terms are separated by ``/`` or newlines and ``#`` starts a comment.
``P(k,d)`` is shorthand for ``P(k,k,d,d)``.
"""
import logging
import re
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import ValidationError

from app.core.errors import ConfigurationError
from app.models.architecture import (
    REFERENCE_ARCHITECTURES,
    ArchitectureConfig,
    ClassifierSpec,
    FoldingParams,
    GmmSpec,
    PoolingParams,
)

logger = logging.getLogger(__name__)

_TERM = re.compile(r"^([A-Za-z]+)\s*\(\s*([^()]*?)\s*\)$")
_ARITY = {"F": (4,), "P": (2, 4), "G": (1,), "C": (1,)}


class _Term:
    __slots__ = ("text", "line", "column")

    def __init__(self, text: str, line: int, column: int):
        self.text, self.line, self.column = text, line, column

    def fail(self, message: str) -> ConfigurationError:
        return ConfigurationError(f"line {self.line}, column {self.column}: {message}")


def _terms(text: str) -> List[_Term]:
    terms = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        column = 1
        for piece in line.split("/"):
            stripped = piece.strip()
            if stripped:
                terms.append(_Term(stripped, line_no, column + len(piece) - len(piece.lstrip())))
            column += len(piece) + 1
    return terms


def _integers(term: _Term, raw: str) -> List[int]:
    values = []
    for item in raw.replace(",", " ").split():
        if not item.isdigit():
            raise term.fail(f"expected a positive integer, found {item!r}")
        values.append(int(item))
    return values


def _layer(term: _Term, index: int):
    match = _TERM.match(term.text)
    if match is None:
        raise term.fail(f"cannot parse term {term.text!r}")
    kind, args = match.group(1).upper(), _integers(term, match.group(2))
    if kind not in _ARITY:
        raise term.fail(f"unknown layer type {match.group(1)!r}")
    if len(args) not in _ARITY[kind]:
        raise term.fail(f"{kind} takes {' or '.join(map(str, _ARITY[kind]))} arguments, got {len(args)}")
    try:
        if kind == "F":
            return FoldingParams(f_y=args[0], f_x=args[1], delta_y=args[2], delta_x=args[3])
        if kind == "P":
            if len(args) == 2:
                args = [args[0], args[0], args[1], args[1]]
            return PoolingParams(k_y=args[0], k_x=args[1], delta_y=args[2], delta_x=args[3])
        if kind == "G":
            return GmmSpec(K=args[0])
        return ClassifierSpec(M=args[0])
    except ValidationError as e:
        reason = "; ".join(err["msg"] for err in e.errors())
        raise ConfigurationError(f"{term.text}: {reason}", layer_index=index) from e


def _input_dims(term: _Term) -> Tuple[int, int, int]:
    values = _integers(term, term.text.split(None, 1)[1] if " " in term.text else "")
    if len(values) != 3:
        raise term.fail("input takes three integers H W C")
    return tuple(values)


def parse_architecture(text: str, name: str = "") -> ArchitectureConfig:
    input_dims: Optional[Tuple[int, int, int]] = None
    layers = []
    for term in _terms(text):
        if term.text.lower().startswith("input"):
            if layers or input_dims is not None:
                raise term.fail("the input term must come first and only once")
            input_dims = _input_dims(term)
            continue
        layers.append(_layer(term, len(layers)))
    try:
        return ArchitectureConfig(input_dims=input_dims or (28, 28, 1), layers=layers, name=name)
    except ValidationError as e:
        raise ConfigurationError("; ".join(err["msg"] for err in e.errors())) from e


def resolve_architecture(value: str) -> ArchitectureConfig:
    """Accept a reference ID (``2L-c``), a path to a text file or inline text."""
    if value in REFERENCE_ARCHITECTURES:
        return parse_architecture(REFERENCE_ARCHITECTURES[value], name=value)
    path = Path(value)
    if "(" not in value and path.suffix and not path.exists():
        raise FileNotFoundError(f"architecture file not found: {path}")
    if "(" not in value and path.exists():
        logger.info(f"Reading architecture from {path}")
        return parse_architecture(path.read_text(encoding="utf-8"), name=path.stem)
    return parse_architecture(value)
