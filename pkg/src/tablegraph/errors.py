"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operands with incompatible shapes."""


class GridConflictError(ValueError):
    """A recovered table grid has overlapping cells.

    ``conflicts`` lists ``(cell_a, cell_b, row, col)`` tuples, where the
    cells are span tuples and (row, col) is a grid position both claim.
    """

    def __init__(self, conflicts):
        self.conflicts = list(conflicts)
        head = ", ".join(f"{a} and {b} overlap at ({r},{c})" for a, b, r, c in self.conflicts[:4])
        more = "" if len(self.conflicts) <= 4 else f" (+{len(self.conflicts) - 4} more)"
        super().__init__(f"inconsistent grid: {head}{more}")


class NumericalError(ArithmeticError):
    """Training or inference produced a non-finite value."""
