"""Freeze (fqdn, esld) pairs using tldextract as an independent public-suffix oracle.

    python tests/fixtures/make_esld_pairs.py

tldextract runs offline against its bundled snapshot, ICANN section only.
"""

import json
from pathlib import Path

import tldextract

FQDNS = """
www.roblox.com metrics.roblox.com apis.roblox.com tr.rbxcdn.com stats.g.doubleclick.net
googleads.g.doubleclick.net www.google-analytics.com region1.analytics.google.com
d2abc1xyz.cloudfront.net fonts.googleapis.com jnn-pa.googleapis.com c.clarity.ms
c.amazon-adsystem.com aax.amazon-adsystem.com s3.amazonaws.com ec2-1-2-3-4.compute-1.amazonaws.com
app.appsflyer.com api2.branch.io log.tiktokv.com mon.tiktokv.com p16-sign.tiktokcdn-us.com
www.bbc.co.uk news.bbc.co.uk a.b.c.example.co.uk www.ox.ac.uk www.gov.uk service.gov.uk
www.example.com.au shop.example.com.au deep.sub.example.net.au www.example.co.jp
city.example.tokyo.jp www.example.ne.jp www.city.kawasaki.jp foo.city.kawasaki.jp
a.b.kawasaki.jp www.ck a.b.ck www.example.co.nz www.example.org.nz www.example.com.br
sub.example.com.br www.example.co.in www.example.gov.in www.example.com.cn www.example.com.tw
www.example.co.za www.example.ac.za www.example.com.mx www.example.de sub.domain.example.de
www.example.fr www.example.gouv.fr www.example.it www.example.es www.example.com.es
www.example.co.kr www.example.or.kr user.github.io project.user.github.io myblog.blogspot.com
myapp.herokuapp.com myapp.appspot.com www.k12.ca.us school.k12.ca.us www.example.us
www.example.io api.example.dev www.example.app www.example.xyz www.example.info
www.example.museum a.example.pvt.k12.ma.us www.example.edu cs.example.edu www.example.mil
www.example.int www.example.eu www.example.co www.example.me.uk www.example.ltd.uk
www.example.plc.uk www.example.org.uk www.example.sch.uk www.example.nhs.uk www.example.police.uk
www.example.com.sg www.example.edu.sg www.example.com.hk www.example.idv.hk www.xn--e1afmkfd.xn--p1ai
www.example.xn--fiqs8s cdn.example.co.il www.example.com.tr www.example.web.tr www.example.ru www.example.com.ar www.example.co.th a.b.example.gov.au www.example.nom.br
""".split()


def main() -> None:
    ext = tldextract.TLDExtract(suffix_list_urls=(), include_psl_private_domains=False, cache_dir=None)
    pairs = []
    for fqdn in FQDNS:
        esld = ext(fqdn).top_domain_under_public_suffix
        if esld:
            pairs.append([fqdn, esld])
    assert len(pairs) == 100, len(pairs)
    out = Path(__file__).with_name("esld_pairs.json")
    out.write_text(json.dumps({"oracle": f"tldextract {tldextract.__version__}, ICANN section",
                               "pairs": pairs}, indent=1) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
