from django.db import models, migrations
import django.core.validators
import django.db.models.deletion
import re


UNIT_INTERVAL = [django.core.validators.MinValueValidator(0.0), django.core.validators.MaxValueValidator(1.0)]
KINDS = ['CA+', 'CA-', 'QA+', 'QA-', 'I-CA+', 'I-CA-', 'I-QA+', 'I-QA-', 'MaxShift', 'DistAlt-CA+', 'DistAlt-QA-']


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='Checkpoint',
            fields=[
                ('id', models.AutoField(verbose_name='ID', auto_created=True, serialize=False, primary_key=True)),
                ('name', models.CharField(help_text='Label of the model in result tables', verbose_name='Name', max_length=100, unique=True, validators=[django.core.validators.RegexValidator(re.compile('^[a-zA-Z0-9][a-zA-Z0-9_.+-]*$'), 'Enter a valid checkpoint name consisting of letters, numbers, underscores, hyphens, pluses or dots.', 'invalid')])),
                ('path', models.CharField(verbose_name='Path', max_length=500)),
                ('arch', models.CharField(verbose_name='Architecture', max_length=50)),
                ('metric', models.CharField(verbose_name='Metric', max_length=20)),
                ('loss_kind', models.CharField(verbose_name='Loss', max_length=20)),
                ('dataset', models.CharField(verbose_name='Dataset', max_length=50, blank=True, default='')),
                ('defense', models.CharField(verbose_name='Defense', max_length=20, blank=True, default='')),
                ('inner_epsilon', models.FloatField(verbose_name='Inner epsilon', null=True, blank=True, validators=UNIT_INTERVAL)),
                ('recall_at_1', models.FloatField(verbose_name='Recall@1', null=True, blank=True, validators=UNIT_INTERVAL)),
                ('created', models.DateTimeField(verbose_name='Created', auto_now_add=True)),
            ],
            options={
                'ordering': ('name',),
            },
        ),
        migrations.CreateModel(
            name='Experiment',
            fields=[
                ('id', models.AutoField(verbose_name='ID', auto_created=True, serialize=False, primary_key=True)),
                ('protocol', models.CharField(verbose_name='Protocol', max_length=20, choices=[('sweep', 'sweep'), ('transfer', 'transfer'), ('universal', 'universal'), ('xi-search', 'xi-search')])),
                ('seed', models.IntegerField(verbose_name='Seed', default=0)),
                ('corpus_size', models.IntegerField(verbose_name='Corpus size', null=True)),
                ('trials', models.IntegerField(help_text='Attacks per cell; empty when every corpus item was attacked', verbose_name='Trials', null=True)),
                ('created', models.DateTimeField(verbose_name='Created', auto_now_add=True)),
            ],
            options={
                'ordering': ('-created', '-id'),
            },
        ),
        migrations.CreateModel(
            name='ResultCell',
            fields=[
                ('id', models.AutoField(verbose_name='ID', auto_created=True, serialize=False, primary_key=True)),
                ('model', models.CharField(verbose_name='Model', max_length=200)),
                ('kind', models.CharField(verbose_name='Attack', max_length=20, choices=[(kind, kind) for kind in KINDS])),
                ('epsilon', models.FloatField(verbose_name='Epsilon', validators=UNIT_INTERVAL)),
                ('wm', models.IntegerField(verbose_name='w/m')),
                ('rank_before', models.FloatField(null=True, blank=True, validators=UNIT_INTERVAL)),
                ('rank_after', models.FloatField(null=True, blank=True, validators=UNIT_INTERVAL)),
                ('sp_before', models.FloatField(null=True, blank=True, validators=UNIT_INTERVAL)),
                ('sp_after', models.FloatField(null=True, blank=True, validators=UNIT_INTERVAL)),
                ('shift', models.FloatField(null=True, blank=True)),
                ('error', models.TextField(verbose_name='Error', blank=True, default='')),
                ('experiment', models.ForeignKey(related_name='cells', to='experiments.Experiment', on_delete=django.db.models.deletion.CASCADE)),
            ],
            options={
                'unique_together': {('experiment', 'model', 'kind', 'epsilon', 'wm')},
            },
        ),
    ]
