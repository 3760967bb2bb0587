import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diatherm.trap import TrapSpec


@pytest.fixture(scope="session")
def reference_spec():
    """The reference operating point: Yb-171 chain, 10 ions."""
    return TrapSpec(
        n_ions=10,
        omega_transverse=4.797e6,
        omega_axial=0.77e6,
        recoil=18.5e3,
        rabi=600e3,
    )


def spec_with(n_ions=10, omega_axial=0.77e6):
    return TrapSpec(
        n_ions=n_ions,
        omega_transverse=4.797e6,
        omega_axial=omega_axial,
        recoil=18.5e3,
        rabi=600e3,
    )
