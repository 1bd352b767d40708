from flow_as_code._commands import menu

if __name__ == '__main__':
    menu()
