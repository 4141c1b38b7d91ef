import os

import pandas as pd
import tensorflow as tf

from utils.write import write_csv

LOG_COLUMNS = ['iter', 'nll', 'guard_lipschitz', 'h']


#### CALLBACKS
class TrainingLogger(tf.keras.callbacks.Callback):

    def __init__(self, run_folder=None, print_every_n_batches=50, seed=None, filename='training_log.csv'):
        super().__init__()
        self.run_folder = run_folder
        self.print_every_n_batches = print_every_n_batches
        self.seed = seed
        self.filename = filename
        self.rows = []

    def on_train_begin(self, logs=None):
        self.rows = []

    def on_epoch_end(self, epoch, logs=None):
        logs = logs or {}
        self.rows.append({'iter': epoch, 'nll': float(logs['nll']),
                          'guard_lipschitz': float(logs['guard_lipschitz']), 'h': float(logs['h'])})
        if self.print_every_n_batches and epoch % self.print_every_n_batches == 0:
            print("%d [nll: %.6f] [lip: %.4f] [h: %.6f]" % (epoch, logs['nll'], logs['guard_lipschitz'], logs['h']))

    def on_train_end(self, logs=None):
        if self.run_folder is not None:
            write_csv(self.frame(), os.path.join(self.run_folder, self.filename), seed=self.seed)

    def frame(self):
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)
