from django.apps import AppConfig


class GraspingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'grasping'
    verbose_name = 'Tactile grasping core'
