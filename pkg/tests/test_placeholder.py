def test_package_smoke_import_and_version():
    import musubi

    assert isinstance(musubi.__version__, str)
    assert len(musubi.__version__.split(".")) >= 2
