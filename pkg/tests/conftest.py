import datetime
from pathlib import Path

import numpy as np
import pytest
import torch
from pydicom.dataset import FileDataset, FileMetaDataset
from pydicom.uid import ExplicitVRLittleEndian, MRImageStorage, generate_uid

from liver4d import phantom
from liver4d.model import UNetConfig

torch.set_num_threads(1)

# canonical sagittal IOP: row cosine (+y, along a row) then column cosine (-z, down a column)
SAGITTAL_IOP = [0.0, 1.0, 0.0, 0.0, 0.0, -1.0]


def dicom_time(ms: float) -> str:
    seconds = ms / 1000.0
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{int(h):02d}{int(m):02d}{s:09.6f}"


def write_dicom_series(directory, images, positions, times_ms, iop=SAGITTAL_IOP, pixel_spacing=(1.8, 1.8),
                       slice_thickness=1.8, series_uid=None, drop=(), slope=1.0, intercept=0.0):
    """Write one synthetic MR series, one file per image; ``drop`` lists tag keywords to omit."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    series_uid = series_uid or generate_uid()
    for i, (image, pos, t) in enumerate(zip(images, positions, times_ms)):
        meta = FileMetaDataset()
        meta.MediaStorageSOPClassUID = MRImageStorage
        meta.MediaStorageSOPInstanceUID = generate_uid()
        meta.TransferSyntaxUID = ExplicitVRLittleEndian
        path = directory / f"im{i:04d}.dcm"
        ds = FileDataset(str(path), {}, file_meta=meta, preamble=b"\0" * 128)
        ds.SOPClassUID = MRImageStorage
        ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
        ds.Modality = "MR"
        ds.ContentDate = datetime.date(2020, 1, 1).strftime("%Y%m%d")
        ds.SeriesInstanceUID = series_uid
        ds.InstanceNumber = i + 1
        ds.ImagePositionPatient = [float(v) for v in pos]
        ds.ImageOrientationPatient = [float(v) for v in iop]
        ds.PixelSpacing = [float(v) for v in pixel_spacing]
        ds.SliceThickness = float(slice_thickness)
        ds.AcquisitionTime = dicom_time(t)
        ds.RescaleSlope = slope
        ds.RescaleIntercept = intercept
        arr = np.asarray(image, dtype=np.uint16)
        ds.Rows, ds.Columns = arr.shape
        ds.SamplesPerPixel = 1
        ds.PhotometricInterpretation = "MONOCHROME2"
        ds.BitsAllocated = 16
        ds.BitsStored = 16
        ds.HighBit = 15
        ds.PixelRepresentation = 0
        ds.PixelData = arr.tobytes()
        for keyword in drop:
            delattr(ds, keyword)
        ds.save_as(path, enforce_file_format=True)
    return directory


@pytest.fixture
def dicom_writer():
    return write_dicom_series


def tiny_spec(**kw) -> phantom.PhantomSpec:
    """A 11x16x16 phantom with one vessel, for tests that need many frames quickly."""
    base = dict(
        volume_shape=(11, 16, 16),
        liver_ellipsoid={"center": [0.0, 0.0, 0.0], "semi_axes": [12.0, 11.0, 11.0]},
        vessels=[{"center": [0.0, 0.0, 0.0], "radius": 2.0, "contrast": 0.6}],
    )
    base.update(kw)
    return phantom.PhantomSpec(**base)


@pytest.fixture
def tiny():
    return tiny_spec()


@pytest.fixture(scope="session")
def default_spec():
    return phantom.PhantomSpec()


@pytest.fixture(scope="session")
def default_static(default_spec):
    return phantom.generate_static_volume(default_spec)


@pytest.fixture(scope="session")
def small_subject(default_spec):
    """Default-anatomy subject with a few offsets and short sequences."""
    return phantom.generate_subject(default_spec, phantom.default_signal(), 0.0, [-32.0, -4.0, 0.0, 4.0, 32.0],
                                    ref_length=12, n_pairs=8)


@pytest.fixture
def tiny_model_config():
    return UNetConfig(input_shape=(16, 16, 3), base_filters=2, dropout_rate=0.0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
