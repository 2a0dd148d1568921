"""Closed-form coefficient expressions.

Grammar: identifiers ``x1..xn``, ``v1..vn`` and ``pi``; binary ``+ - * / ^``;
unary minus; calls to ``exp sin cos sqrt abs``; numeric literals.  Parsing
goes through :mod:`ast` after mapping ``^`` to ``**``; anything outside the
whitelist is rejected.
"""
from __future__ import annotations

import ast
import math
from functools import cached_property

import numpy as np

from .errors import ExpressionError

FUNCTIONS = ("exp", "sin", "cos", "sqrt", "abs")
_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/", ast.Pow: "**"}


class Expression:
    """A parsed expression in ``n`` position and ``n`` velocity variables.

    Calling it with arrays ``x``, ``v`` of leading axis ``n`` evaluates it
    elementwise and always returns a float array of the broadcast shape.
    """

    def __init__(self, text: str, n: int):
        self.text = str(text)
        self.n = int(n)
        try:
            tree = ast.parse(self.text.replace("^", "**").strip(), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {text!r}: {exc.msg}") from None
        self._body = self._emit(tree.body)
        names = {f"x{k + 1}": f"x[{k}]" for k in range(self.n)}
        names.update({f"v{k + 1}": f"v[{k}]" for k in range(self.n)})
        np_body = self._emit(tree.body, names=names, module="np")
        # body is assembled from whitelisted nodes only
        self._numpy = eval(f"lambda x, v: {np_body}", {"np": np})  # noqa: S307

    def _emit(self, node, names=None, module="math") -> str:
        emit = lambda sub: self._emit(sub, names, module)  # noqa: E731
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return repr(float(node.value))
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return repr(math.pi)
            valid = {f"x{k + 1}" for k in range(self.n)} | {f"v{k + 1}" for k in range(self.n)}
            if node.id not in valid:
                raise ExpressionError(f"unknown identifier {node.id!r} in {self.text!r}")
            return names[node.id] if names else node.id
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return f"({emit(node.left)} {_BINOPS[type(node.op)]} {emit(node.right)})"
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            sign = "-" if isinstance(node.op, ast.USub) else "+"
            return f"({sign}{emit(node.operand)})"
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS:
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"{node.func.id} takes exactly one argument in {self.text!r}")
            fname = node.func.id
            if module == "math" and fname == "abs":
                return f"abs({emit(node.args[0])})"
            return f"{module}.{fname}({emit(node.args[0])})"
        raise ExpressionError(f"unsupported construct {ast.dump(node)[:40]}... in {self.text!r}")

    def __call__(self, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        shape = np.broadcast_shapes(x.shape[1:], v.shape[1:])
        with np.errstate(all="ignore"):
            out = self._numpy(x, v)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    @property
    def scalar_source(self) -> str:
        """Body of a scalar function of ``x1.., v1..`` using :mod:`math`."""
        return self._body

    @cached_property
    def is_constant(self) -> bool:
        return not any(tok in self._body for tok in [f"x{k + 1}" for k in range(self.n)] + [f"v{k + 1}" for k in range(self.n)])

    def __repr__(self):
        return f"Expression({self.text!r}, n={self.n})"


def parse(text, n: int) -> Expression:
    if isinstance(text, Expression):
        return text
    if isinstance(text, (int, float)):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ExpressionError(f"expression must be a string or number, got {type(text).__name__}")
    return Expression(text, n)
