from django.apps import AppConfig


class StefanConfig(AppConfig):
    name = 'stefan'
    verbose_name = 'Stefan mushy-region control'
