from pathlib import Path

from django.db import models, transaction
from django.utils.translation import gettext_lazy as _

from advranking.attacks import AttackKind
from advranking.ranker import EmbeddingModel, load_model

from .harness import CellResult, ResultKey, ResultTable
from .validators import unit_interval, validate_label


PROTOCOLS = ('sweep', 'transfer', 'universal', 'xi-search')
PROTOCOL_CHOICES = [(protocol, protocol) for protocol in PROTOCOLS]
KIND_CHOICES = [(kind.value, kind.value) for kind in AttackKind]



class Checkpoint(models.Model):
    name            = models.CharField(_('Name'), max_length=100, unique=True, validators=[validate_label],
                        help_text=_('Label of the model in result tables'))
    path            = models.CharField(_('Path'), max_length=500)
    arch            = models.CharField(_('Architecture'), max_length=50)
    metric          = models.CharField(_('Metric'), max_length=20)
    loss_kind       = models.CharField(_('Loss'), max_length=20)
    dataset         = models.CharField(_('Dataset'), max_length=50, blank=True, default='')
    defense         = models.CharField(_('Defense'), max_length=20, blank=True, default='')
    inner_epsilon   = models.FloatField(_('Inner epsilon'), null=True, blank=True, validators=unit_interval)
    recall_at_1     = models.FloatField(_('Recall@1'), null=True, blank=True, validators=unit_interval)
    created         = models.DateTimeField(_('Created'), auto_now_add=True)

    class Meta:
        ordering = ('name',)

    def __str__(self):
        return self.name

    @property
    def tag(self):
        metric = 'E' if self.metric == 'euclidean' else 'C'
        loss = 'C' if self.loss_kind == 'contrastive' else 'T'
        return metric + loss + ('D' if self.defense else '')

    def load(self) -> EmbeddingModel:
        return load_model(self.path)

    @classmethod
    def register(cls, name, path, model: EmbeddingModel, dataset='', recall_at_1=None):
        """Create or update the ledger entry of a freshly written checkpoint."""

        checkpoint, _created = cls.objects.update_or_create(
            name=name,
            defaults=dict(
                path=str(Path(path).resolve()),
                arch=model.arch,
                metric=model.metric.value,
                loss_kind=model.meta.get('loss_kind', ''),
                dataset=dataset,
                defense=model.meta.get('defense', '') or '',
                inner_epsilon=model.meta.get('inner_epsilon'),
                recall_at_1=recall_at_1,
            ),
        )
        return checkpoint



class Experiment(models.Model):
    protocol        = models.CharField(_('Protocol'), max_length=20, choices=PROTOCOL_CHOICES)
    seed            = models.IntegerField(_('Seed'), default=0)
    corpus_size     = models.IntegerField(_('Corpus size'), null=True)
    trials          = models.IntegerField(_('Trials'), null=True,
                        help_text=_('Attacks per cell; empty when every corpus item was attacked'))
    created         = models.DateTimeField(_('Created'), auto_now_add=True)

    class Meta:
        ordering = ('-created', '-id')

    def __str__(self):
        return '{} #{}'.format(self.protocol, self.pk)

    @property
    def has_errors(self):
        return self.cells.exclude(error='').exists()

    @classmethod
    @transaction.atomic
    def record(cls, protocol, table: ResultTable, seed=0, corpus_size=None, trials=None):
        """Store ``table`` as a new experiment."""

        experiment = cls.objects.create(protocol=protocol, seed=seed, corpus_size=corpus_size, trials=trials)
        ResultCell.objects.bulk_create([
            ResultCell(
                experiment  = experiment,
                model       = cell.key.model,
                kind        = cell.key.kind.value,
                epsilon     = cell.key.epsilon,
                wm          = cell.key.wm,
                rank_before = cell.rank_before,
                rank_after  = cell.rank_after,
                sp_before   = cell.sp_before,
                sp_after    = cell.sp_after,
                shift       = cell.shift,
                error       = cell.error,
            ) for cell in table.rows()
        ])
        return experiment

    def table(self) -> ResultTable:
        return ResultTable().extend(cell.as_result() for cell in self.cells.all())



class ResultCell(models.Model):
    experiment      = models.ForeignKey(Experiment, related_name='cells', on_delete=models.CASCADE)
    model           = models.CharField(_('Model'), max_length=200)
    kind            = models.CharField(_('Attack'), max_length=20, choices=KIND_CHOICES)
    epsilon         = models.FloatField(_('Epsilon'), validators=unit_interval)
    wm              = models.IntegerField(_('w/m'))
    rank_before     = models.FloatField(null=True, blank=True, validators=unit_interval)
    rank_after      = models.FloatField(null=True, blank=True, validators=unit_interval)
    sp_before       = models.FloatField(null=True, blank=True, validators=unit_interval)
    sp_after        = models.FloatField(null=True, blank=True, validators=unit_interval)
    shift           = models.FloatField(null=True, blank=True)
    error           = models.TextField(_('Error'), blank=True, default='')

    class Meta:
        unique_together = (('experiment', 'model', 'kind', 'epsilon', 'wm'),)

    def __str__(self):
        return '{} {} eps={:g} wm={}'.format(self.model, self.kind, self.epsilon, self.wm)

    def as_result(self) -> CellResult:
        return CellResult(
            ResultKey(self.model, AttackKind(self.kind), self.epsilon, self.wm),
            self.rank_before, self.rank_after, self.sp_before, self.sp_after, self.shift, self.error,
        )
