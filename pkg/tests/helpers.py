"""Shared test oracles."""


def finite_difference_check(loss_fn, flat, coords, step=1e-5, rel_tol=1e-4):
    """Compare an analytic gradient against central finite differences at the
    given coordinates of the flat parameter vector."""
    _, grad = loss_fn()
    for coord in coords:
        original = flat[coord]
        flat[coord] = original + step
        up, _ = loss_fn()
        flat[coord] = original - step
        down, _ = loss_fn()
        flat[coord] = original
        numeric = (up - down) / (2 * step)
        denom = max(abs(numeric), abs(grad[coord]), 1e-8)
        assert abs(grad[coord] - numeric) / denom < rel_tol, (
            f"coordinate {coord}: analytic {grad[coord]}, numeric {numeric}"
        )
