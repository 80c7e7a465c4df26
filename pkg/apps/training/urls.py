from django.urls import path
from .views import ExperimentRunDetailAPIView, ExperimentRunListAPIView, ReplicationSummaryAPIView

urlpatterns = [
    path('api/runs/', ExperimentRunListAPIView.as_view(), name='api_run_list'),
    path('api/runs/summary/', ReplicationSummaryAPIView.as_view(), name='api_run_summary'),
    path('api/runs/<int:pk>/', ExperimentRunDetailAPIView.as_view(), name='api_run_detail'),
]
