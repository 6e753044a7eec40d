import hashlib
import random
from pathlib import Path

import pytest

from gridbox import auth, dicom
from gridbox.federation import LocalNetwork, Topology
from gridbox.node import Gridbox
from gridbox.sim import SIM_EPOCH

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
KEY = hashlib.sha256(b"test-vo-key").digest()
NOW = SIM_EPOCH


def golden_bytes() -> bytes:
    return (FIXTURES / "golden_2x2.dcm").read_bytes()


def make_token(user="alice", roles=("admin",), now=NOW, ttl=3600, depth=8, key=KEY) -> str:
    return auth.sign(auth.Token(user, tuple(roles), now, ttl, depth), key).encode()


def sample_dicom(patient_id="P-0001", name="Doe^Jane", age=55, sex="F", hrt=True, pixels=(0, 100, 200, 255),
                 rows=2, cols=2, view="CC", laterality="L", study="20040315", birth="19490704") -> bytes:
    fields = {
        dicom.STUDY_DATE: study,
        dicom.MODALITY: "MG",
        dicom.HRT_FLAG: f"HRT={int(hrt)}",
        dicom.PATIENT_NAME: name,
        dicom.PATIENT_ID: patient_id,
        dicom.PATIENT_BIRTH_DATE: birth,
        dicom.PATIENT_SEX: sex,
        dicom.PATIENT_AGE: f"{age:03d}Y",
        dicom.VIEW_POSITION: view,
        dicom.IMAGE_LATERALITY: laterality,
    }
    return dicom.write_dicom(dicom.build(fields, list(pixels), rows, cols))


def make_grid(topology: Topology, faults=None, data_root=None, **kw):
    """One in-process node per site on a shared LocalNetwork."""
    from gridbox.federation import Faults

    net = LocalNetwork(faults or Faults())
    users = auth.UserTable()
    nodes = {}
    for i, site in enumerate(sorted(topology.sites)):
        nodes[site] = Gridbox(
            site,
            KEY,
            users,
            topology,
            net,
            data_dir=(Path(data_root) / site) if data_root else None,
            clock=lambda: NOW,
            rng=random.Random(i),
            concurrent=False,
            fsync=False,
            transfer_backoff_s=0.0,
            **kw,
        )
    return net, nodes


@pytest.fixture
def token():
    return make_token()


@pytest.fixture
def golden():
    return golden_bytes()
