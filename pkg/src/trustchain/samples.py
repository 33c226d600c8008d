"""Reference inputs for the walkthroughs and fixtures: an SLX kernel command
line, a Debian os-release file and the iPXE menu-entry script shape."""

from __future__ import annotations

SLX_KERNEL_CMDLINE = (
    "slxbase=boot/bwlp/maxilinux-u2004/31r1 slxsrv=10.0.2.3 "
    "slx.stage4.path=stage4/bwlp/maxilinux-bookworm-6.1.33-94.qcow2 "
    "bridged quiet nosplash systemd.show_status=0 rd.shell=0 "
    "rd.emergency=reboot ipv4.ip=10.0.2.42 ipv4.router=10.0.2.1 "
    "ipv4.dns=10.0.2.1 ipv4.hostname=client ipv4.if=a8:a1:59:0b:fe:87 "
    "ipv4.ntpsrv=de.pool.ntp.org ipv4.subnet=255.255.255.0 slx.swap "
    "ibt=off slx.ipxe.id=1"
)

BOOKWORM_OS_RELEASE = """\
PRETTY_NAME="Debian GNU/Linux 12 (bookworm)"
NAME="Debian GNU/Linux"
VERSION_ID="12"
VERSION="12 (bookworm)"
VERSION_CODENAME=bookworm
ID=debian
HOME_URL="https://www.debian.org/"
SUPPORT_URL="https://www.debian.org/support"
BUG_REPORT_URL="https://bugs.debian.org/"
"""

UKI_MENU_SCRIPT = """\
#!ipxe
set ipappend1 ip=${ip}:10.0.2.3:${gateway}:\\${netmask}
set ipappend2 BOOTIF=01-${mac:hexhyp}
set serverip 10.0.2.3 ||
iseq ${idx} ${} && set idx:string X ||
iseq ${self} ${} && set self http://10.0.2.3/boot/ipxe? ||
set menuentryid 1 ||
imgfree ||
boot /boot/default/kernel.efi || goto fail
goto fail
goto end
:fail
prompt --timeout 5000 Error launching selected boot entry ||
:end
"""

SELF_URL = (
    "http://10.0.2.3/boot/ipxe?uuid=${uuid}&mac=${mac}"
    "&manuf=${manufacturer:uristring}&product=${product:uristring}"
    "&platform=${platform:uristring}&slx-extensions=${slxext}"
)

VERIFIED_CHAIN_SCRIPT = f"""\
#!ipxe
imgtrust --permanent
set self:string {SELF_URL}
imgfetch --name ipxe ${{self}} || goto fail
imgverify ipxe ${{self}}&sig=true || goto fail
imgload ipxe || goto fail
boot || goto fail
:fail
prompt --timeout 5000 Error launching selected boot entry ||
"""

PLAIN_CHAIN_SCRIPT = f"""\
#!ipxe
set self:string {SELF_URL}
chain -ar ${{self}} || goto fail
:fail
prompt --timeout 5000 Error launching selected boot entry ||
"""

CLIENT_ENV = {
    "uuid": "4c4c4544-0042-3510-8052-b4c04f4d3732",
    "mac": "a8:a1:59:0b:fe:87",
    "manufacturer": "Dell Inc.",
    "product": "OptiPlex 7060",
    "platform": "efi",
    "slxext": "",
    "ip": "10.0.2.42",
    "gateway": "10.0.2.1",
}
