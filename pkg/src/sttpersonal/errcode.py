E_SUCCESS = 0x00000000

# audio
E_TOO_SHORT = 0x00000101
E_SILENT_SIGNAL = 0x00000102
E_BAD_AUDIO = 0x00000103

# model
E_SHAPE_MISMATCH = 0x00000201
E_TAPE_REUSE = 0x00000202

# ctc
E_INFEASIBLE = 0x00000301
E_BUDGET_EXCEEDED = 0x00000302
E_BAD_LABEL = 0x00000303

# trainer
E_NONFINITE_LOSS = 0x00000401
E_EMPTY_DATASET = 0x00000402

# checkpoint
E_NONFINITE = 0x00000501
E_BAD_MAGIC = 0x00000502
E_VERSION_MISMATCH = 0x00000503
E_CONFIG_MISMATCH = 0x00000504
E_TRUNCATED_FILE = 0x00000505
E_CHECKSUM_MISMATCH = 0x00000506
E_CHECKPOINT_IO = 0x00000507

# cache
E_BAD_TRANSCRIPT = 0x00000601
E_NOT_READY = 0x00000602
E_BAD_TOKEN = 0x00000603

# bench / cli
E_EMPTY_GRID = 0x00000701
E_CONFIG = 0x00000702
