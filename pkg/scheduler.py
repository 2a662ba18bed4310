from apscheduler.schedulers.background import BackgroundScheduler
from apscheduler.triggers.interval import IntervalTrigger
import pytz

from config import config


def init_scheduler(app, pool):
    """
    初始化定时任务调度器

    Args:
        app: Flask应用实例
        pool: 已打开的对象池
    """
    scheduler = BackgroundScheduler(timezone=pytz.timezone(config.LOG_TIMEZONE))

    def scrub_pool():
        """定期巡检：校验元数据和对象，修复后重算残余不一致的校验行"""
        from errors import PoolError
        from recovery import scrub
        if pool.closed or pool.failed:
            return
        try:
            report = scrub(pool)
            app.logger.info(f"定时巡检完成: 扫描 {report.objects_scanned} 个对象，"
                            f"修复 {report.repaired} 个，不可恢复 {report.unrecoverable} 个")
        except PoolError as e:
            app.logger.error(f"定时巡检失败: {str(e)}")

    def log_stats():
        """定期输出运行统计"""
        if pool.closed:
            return
        counters = pool.stats.snapshot()
        vulnerability = counters['vulnerability']
        app.logger.info(f"运行统计: 提交 {int(counters['commits'])}，中止 {int(counters['aborts'])}，"
                        f"修复 {counters['repair'].get('count', 0)} 页，"
                        f"未校验访问 {int(vulnerability['vulnerable_bytes'])} 字节")

    scheduler.add_job(
        func=scrub_pool,
        trigger=IntervalTrigger(seconds=config.PGL_SCRUB_PERIOD_SECONDS),
        id='scrub_pool',
        name='定期巡检对象池',
        replace_existing=True
    )

    scheduler.add_job(
        func=log_stats,
        trigger=IntervalTrigger(seconds=config.PGL_STATS_PERIOD_SECONDS),
        id='log_pool_stats',
        name='输出对象池运行统计',
        replace_existing=True
    )

    # 启动调度器
    scheduler.start()
    app.logger.info("定时任务调度器已启动")

    # 保存调度器实例到应用配置中
    app.scheduler = scheduler
    return scheduler
