import pytest


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail)`` prints one PASS/FAIL line for acceptance criterion ``n``, then asserts."""
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit
