"""Seeded benchmark generators and dataset plumbing."""

from .adding import AddingSample, gen_adding, gen_adding_batch
from .data import BatchIterator, SequenceDataset, export_columns, split_and_batch, train_val_split
from .hateful8 import CODES, WINDOW, Hateful8Sample, encode, gen_hateful8, gen_noise, make_hateful8_dataset
from .mackey_glass import TAU_DISTANCE_GRID, MGParams, MGSeries, gen_mackey_glass, gen_mackey_glass_batch
from .mnist import (
    IDXError,
    MnistData,
    default_data_dir,
    fetch_mnist,
    import_npm_digits,
    load_mnist_sequences,
    mnist_permutation,
    read_idx,
    write_idx,
)
