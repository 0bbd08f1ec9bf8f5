"""
Arithmetic expression trees used as hyper-features.

An Expression is an immutable binary tree over the features X0..Xk-1 with
the operators +, -, * and protected division. Trees are evaluated column-wise
with numpy; every node value is clamped so evaluation is a total function.
"""
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .exceptions import EvaluationError, ExpressionSyntaxError

logger = logging.getLogger(__name__)

# Denominators at or below this magnitude make protected division return 1
PROTECTED_DIVISION_EPSILON = 1e-12
# Largest magnitude any node may take
VALUE_LIMIT = 1e150

FEATURE = "feature"
CONSTANT = "constant"
OPERATOR = "operator"


class Op(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    PDIV = "pdiv"


SYMBOLS = {Op.ADD: "+", Op.SUB: "-", Op.MUL: "*", Op.PDIV: "/"}
PRECEDENCE = {Op.ADD: 1, Op.SUB: 1, Op.MUL: 2, Op.PDIV: 2}
OPERATORS = (Op.ADD, Op.SUB, Op.MUL, Op.PDIV)


@dataclass(frozen=True)
class Expression:
    """A single hyper-feature: feature reference, constant, or binary operator node."""

    kind: str
    op: Union[Op, None] = None
    children: Tuple["Expression", ...] = ()
    index: int = -1
    value: float = 0.0

    def __post_init__(self):
        if self.kind == OPERATOR:
            if self.op not in OPERATORS or len(self.children) != 2:
                raise ValueError("operator nodes need a known operator and exactly two children")
        elif self.kind == FEATURE:
            if self.children or self.index < 0:
                raise ValueError("feature nodes need a non-negative index and no children")
        elif self.kind == CONSTANT:
            if self.children or not math.isfinite(self.value):
                raise ValueError("constant nodes need a finite value and no children")
        else:
            raise ValueError(f"unknown node kind {self.kind!r}")

    @classmethod
    def feature(cls, index: int) -> "Expression":
        return cls(FEATURE, index=int(index))

    @classmethod
    def constant(cls, value: float) -> "Expression":
        return cls(CONSTANT, value=float(value))

    @classmethod
    def binary(cls, op: Op, left: "Expression", right: "Expression") -> "Expression":
        return cls(OPERATOR, op=Op(op), children=(left, right))

    @property
    def is_leaf(self) -> bool:
        return self.kind != OPERATOR

    @property
    def left(self) -> "Expression":
        return self.children[0]

    @property
    def right(self) -> "Expression":
        return self.children[1]

    @cached_property
    def size(self) -> int:
        """Node count."""
        if self.is_leaf:
            return 1
        return 1 + self.left.size + self.right.size

    @cached_property
    def depth(self) -> int:
        """Tree depth; a lone leaf has depth 1."""
        if self.is_leaf:
            return 1
        return 1 + max(self.left.depth, self.right.depth)

    @cached_property
    def max_feature_index(self) -> int:
        """Largest referenced feature index, or -1 when the tree has no features."""
        if self.kind == FEATURE:
            return self.index
        if self.kind == CONSTANT:
            return -1
        return max(self.left.max_feature_index, self.right.max_feature_index)

    def is_constant(self, value: float) -> bool:
        return self.kind == CONSTANT and self.value == value

    def subtree_at(self, position: int) -> "Expression":
        """Return the subtree rooted at a pre-order position."""
        node = self
        while position:
            if not 0 <= position < node.size:
                raise IndexError(f"position {position} outside tree of size {node.size}")
            position -= 1
            if position < node.left.size:
                node = node.left
            else:
                position -= node.left.size
                node = node.right
        return node

    def replace_at(self, position: int, replacement: "Expression") -> "Expression":
        """Return a copy with the subtree at a pre-order position replaced."""
        if position == 0:
            return replacement
        if self.is_leaf or not 0 < position < self.size:
            raise IndexError(f"position {position} outside tree of size {self.size}")
        position -= 1
        if position < self.left.size:
            return Expression.binary(self.op, self.left.replace_at(position, replacement), self.right)
        return Expression.binary(self.op, self.left, self.right.replace_at(position - self.left.size, replacement))

    def __str__(self) -> str:
        return format_expression(self)


Hyperfeatures = Sequence[Expression]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _clamp(values: np.ndarray) -> np.ndarray:
    values = np.where(np.isfinite(values), values, 0.0)
    return np.clip(values, -VALUE_LIMIT, VALUE_LIMIT)


def _evaluate(expr: Expression, X: np.ndarray) -> np.ndarray:
    if expr.kind == FEATURE:
        if expr.index >= X.shape[1]:
            raise EvaluationError(
                f"feature X{expr.index} out of range for data with {X.shape[1]} features",
                index=expr.index,
            )
        return _clamp(X[:, expr.index].astype(float))
    if expr.kind == CONSTANT:
        return np.full(X.shape[0], expr.value)

    left = _evaluate(expr.left, X)
    right = _evaluate(expr.right, X)
    with np.errstate(all="ignore"):
        if expr.op == Op.ADD:
            out = left + right
        elif expr.op == Op.SUB:
            out = left - right
        elif expr.op == Op.MUL:
            out = left * right
        else:
            protected = np.abs(right) <= PROTECTED_DIVISION_EPSILON
            out = np.where(protected, 1.0, left / np.where(protected, 1.0, right))
    return _clamp(out)


def _as_matrix(data) -> np.ndarray:
    X = getattr(data, "X", data)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    return X


def evaluate(expr: Expression, row: Sequence[float]) -> float:
    """Evaluate an expression on a single row of feature values."""
    return float(_evaluate(expr, _as_matrix(row))[0])


def evaluate_column(expr: Expression, dataset) -> np.ndarray:
    """
    Evaluate an expression on every row of a dataset.

    Args:
        expr: Expression to evaluate
        dataset: Dataset, or any 2-D array of shape (rows, features)

    Returns:
        Vector with one value per row
    """
    return _evaluate(expr, _as_matrix(dataset))


def evaluate_all(hyperfeatures: Hyperfeatures, dataset) -> np.ndarray:
    """Evaluate several expressions into an (rows, len(hyperfeatures)) matrix."""
    X = _as_matrix(dataset)
    if not hyperfeatures:
        return np.empty((X.shape[0], 0))
    return np.column_stack([_evaluate(expr, X) for expr in hyperfeatures])


# ---------------------------------------------------------------------------
# Simplification
# ---------------------------------------------------------------------------

_NO_FEATURES = np.zeros((1, 0))


def _rewrite(node: Expression) -> Expression:
    """Apply constant folding, then the identity rules, once at the root."""
    if node.is_leaf:
        return node
    if node.max_feature_index < 0:
        return Expression.constant(float(_evaluate(node, _NO_FEATURES)[0]))

    left, right = node.children
    if node.op == Op.ADD:
        if right.is_constant(0.0):
            return left
        if left.is_constant(0.0):
            return right
        if left == right:
            return Expression.binary(Op.MUL, Expression.constant(2.0), left)
    elif node.op == Op.SUB:
        if right.is_constant(0.0):
            return left
    elif node.op == Op.MUL:
        if left.is_constant(1.0):
            return right
        if right.is_constant(1.0):
            return left
    elif node.op == Op.PDIV:
        if right.is_constant(1.0):
            return left
    return node


def simplify(expr: Expression) -> Expression:
    """
    Simplify an expression bottom-up until no rule fires.

    Constant subtrees are folded first at every node, then the rules
    E+0=E, E+E=2*E, E-0=E, 1*E=E and E/1=E (with the commutative mirror
    images 0+E and E*1) are applied.
    """
    if expr.is_leaf:
        return expr
    left = simplify(expr.left)
    right = simplify(expr.right)
    node = expr if (left is expr.left and right is expr.right) else Expression.binary(expr.op, left, right)
    while True:
        rewritten = _rewrite(node)
        if rewritten is node:
            return node
        node = rewritten


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>//|[-+*/^()])"
    r")"
)
_FEATURE_RE = re.compile(r"X(\d+)$")


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _TOKEN_RE.match(text, pos)
        if not match or match.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionSyntaxError(f"unexpected character {text[start]!r}", start)
        kind = match.lastgroup
        tokens.append((kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser for the infix hyper-feature grammar."""

    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> Tuple[str, str, int]:
        return self.tokens[self.pos]

    def advance(self) -> Tuple[str, str, int]:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, value: str):
        kind, text, position = self.advance()
        if text != value or kind != "op":
            raise ExpressionSyntaxError(f"expected {value!r} but found {text or 'end of input'!r}", position)

    def parse(self) -> Expression:
        expr = self.expr()
        kind, text, position = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected {text!r}", position)
        return expr

    def expr(self) -> Expression:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            op = Op.ADD if self.advance()[1] == "+" else Op.SUB
            node = Expression.binary(op, node, self.term())
        return node

    def term(self) -> Expression:
        node = self.power()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/", "//"):
            op = Op.MUL if self.advance()[1] == "*" else Op.PDIV
            node = Expression.binary(op, node, self.power())
        return node

    def power(self) -> Expression:
        node = self.atom()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            kind, text, position = self.advance()
            if kind != "number" or not text.isdigit():
                raise ExpressionSyntaxError("exponent must be a non-negative integer", position)
            node = _repeat_multiply(node, int(text))
        return node

    def atom(self) -> Expression:
        kind, text, position = self.advance()
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "op" and text == "-" and self.peek()[0] == "number":
            return Expression.constant(-float(self.advance()[1]))
        if kind == "number":
            return Expression.constant(float(text))
        if kind == "name":
            match = _FEATURE_RE.match(text)
            if not match:
                raise ExpressionSyntaxError(f"unknown identifier {text!r}", position)
            return Expression.feature(int(match.group(1)))
        raise ExpressionSyntaxError(f"unexpected {text or 'end of input'!r}", position)


def _repeat_multiply(base: Expression, exponent: int) -> Expression:
    if exponent == 0:
        return Expression.constant(1.0)
    node = base
    for _ in range(exponent - 1):
        node = Expression.binary(Op.MUL, node, base)
    return node


def parse(text: str) -> Expression:
    """
    Parse infix text into an Expression.

    Standard precedence (* and / over + and -), left associativity,
    `/` and `//` both mean protected division and `^k` expands to k-fold
    multiplication.
    """
    return _Parser(text).parse()


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        text = str(int(value))
    else:
        text = repr(value)
    return f"({text})" if value < 0 else text


def format_expression(expr: Expression) -> str:
    """Render an Expression so that parse() returns the same tree."""
    if expr.kind == FEATURE:
        return f"X{expr.index}"
    if expr.kind == CONSTANT:
        return _format_number(expr.value)

    precedence = PRECEDENCE[expr.op]
    left = format_expression(expr.left)
    if not expr.left.is_leaf and PRECEDENCE[expr.left.op] < precedence:
        left = f"({left})"
    right = format_expression(expr.right)
    if not expr.right.is_leaf and PRECEDENCE[expr.right.op] <= precedence:
        right = f"({right})"
    return f"{left} {SYMBOLS[expr.op]} {right}"


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------

def grow_random(max_depth: int, arity: int, rng: np.random.Generator) -> Expression:
    """
    Grow a random tree whose leaves are feature references only.

    Each node below the depth limit is an operator with probability
    4 / (4 + arity), i.e. uniform over the combined primitive set.
    """
    if max_depth < 1 or arity < 1:
        raise ValueError("max_depth and arity must be at least 1")
    if max_depth == 1 or rng.integers(len(OPERATORS) + arity) >= len(OPERATORS):
        return Expression.feature(int(rng.integers(arity)))
    op = OPERATORS[int(rng.integers(len(OPERATORS)))]
    left = grow_random(max_depth - 1, arity, rng)
    right = grow_random(max_depth - 1, arity, rng)
    return Expression.binary(op, left, right)


# ---------------------------------------------------------------------------
# Asset files
# ---------------------------------------------------------------------------

BUNDLED_ASSET = Path(__file__).parent / "assets" / "hyperfeatures_bcm.txt"


def _parse_lines(lines: Iterable[str]) -> List[Expression]:
    exprs = []
    for line in lines:
        text = line.split("#", 1)[0].strip()
        if text:
            exprs.append(parse(text))
    return exprs


def load_hyperfeatures(path: Union[str, Path]) -> List[Expression]:
    """Load one formula per line; blank lines and # comments are ignored."""
    with open(path, encoding="utf-8") as handle:
        return _parse_lines(handle)


def save_hyperfeatures(hyperfeatures: Hyperfeatures, path: Union[str, Path]):
    """Write one formula per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for expr in hyperfeatures:
            handle.write(format_expression(expr) + "\n")


def bundled_hyperfeatures() -> List[Expression]:
    """The ten hyper-features harvested from the three-image mixed runs."""
    return load_hyperfeatures(BUNDLED_ASSET)


def identity_features(arity: int) -> List[Expression]:
    """X0..X(arity-1), the original feature space as expressions."""
    return [Expression.feature(i) for i in range(arity)]
