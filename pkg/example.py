import os

from src.experiments import preset_config
from src.model import FitOptions, optimize_hyperparameters
from src.synth import misalignment_errors, simulate
from src.utils import Standardizer, dataset_frame, write_table

if __name__ == "__main__":
    bundle = simulate(preset_config("retrieval", seed=1))  # two circles and two lines, one linear source
    Y_set = Standardizer.fit(bundle.Y_set).transform(bundle.Y_set)

    result = optimize_hyperparameters(Y_set, bundle.records, 2, bundle.specs, opts=FitOptions(seed=1))
    fit = result.fit
    print(fit.summary())
    print(misalignment_errors(fit.X, bundle.assignment))

    if not os.path.exists('dist'):
        os.makedirs('dist')
    ids = [f"i{k + 1:04d}" for k in range(fit.n)]
    write_table(dataset_frame(ids, [fit.X], ["x"], bundle.records.times, bundle.records.events),
                'dist/retrieval-latent.csv', seed=1)
    print("Done: 'retrieval-latent.csv' is saved in dist folder")
