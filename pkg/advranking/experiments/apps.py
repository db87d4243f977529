from django.apps import AppConfig

class ExperimentsConfig(AppConfig):
    name = 'advranking.experiments'
    verbose_name = 'Ranking attack experiments'
