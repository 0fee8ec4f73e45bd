# detector_service.app package
