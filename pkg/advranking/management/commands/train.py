"""Train a vanilla embedding model and register its checkpoint"""

import logging

from advranking.ranker import build_model, train

from . import TrainingCommand


class Command(TrainingCommand):
    help = 'Train a vanilla embedding model by triplet or contrastive metric learning.'
    log = logging.getLogger(__name__)

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])
        cfg = self.train_config(options)

        with self.library_errors('Training failed'):
            dataset = self.load_dataset(options, 'train')
            model = build_model(options['arch'], dataset.input_dim, seed=cfg.seed)
            model, history = train(model, dataset, cfg)
        model = model.with_meta(dataset=dataset.name)

        checkpoint = self.store(model, options, dataset)
        return 'Trained {} ({}), final loss {}'.format(
            checkpoint.name, checkpoint.tag,
            '{:.6f}'.format(history.losses[-1]) if history.losses else 'n/a',
        )
