from .image import (
    CQRecord,
    DumpImage,
    IMAGE_VERSION,
    MAGIC,
    MRRecord,
    PDRecord,
    QPRecord,
    RecordType,
    RequesterRecord,
    ResponderRecord,
    SRQRecord,
)
from .dump import IMAGE_SUFFIX, dump_context, dump_context_to_file, load_image, qp_record
from .restore import (
    REFILL_STATES,
    RestoreCommand,
    install_task_state,
    refill,
    restore_context,
    restore_object,
    walk_qp,
)

__all__ = [
    "CQRecord",
    "DumpImage",
    "IMAGE_VERSION",
    "MAGIC",
    "MRRecord",
    "PDRecord",
    "QPRecord",
    "RecordType",
    "RequesterRecord",
    "ResponderRecord",
    "SRQRecord",
    "IMAGE_SUFFIX",
    "dump_context",
    "dump_context_to_file",
    "load_image",
    "qp_record",
    "REFILL_STATES",
    "RestoreCommand",
    "install_task_state",
    "refill",
    "restore_context",
    "restore_object",
    "walk_qp",
]
